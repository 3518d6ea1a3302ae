use std::io::Write;

use distildp::corpus::{generate_toy_corpus, load_records, save_records};
use distildp::{Error, Schema};

fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn loads_records_in_file_order() {
    let f = write_lines(&[
        r#"{"text": "great coffee", "attributes": {"type": "Cafe", "stars": "5"}}"#,
        r#"{"text": "sticky floors", "attributes": {"type": "Bar", "stars": "2"}}"#,
        r#"{"text": "fine", "attributes": {"type": "Diner", "stars": "3"}}"#,
    ]);
    let records = load_records(f.path(), &Schema::toy()).unwrap();
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    assert_eq!(texts, ["great coffee", "sticky floors", "fine"]);
}

#[test]
fn missing_attribute_names_line_and_attribute() {
    let f = write_lines(&[
        r#"{"text": "ok", "attributes": {"type": "Cafe", "stars": "4"}}"#,
        r#"{"text": "no stars", "attributes": {"type": "Cafe"}}"#,
    ]);
    let err = load_records(f.path(), &Schema::toy()).unwrap_err();
    let Error::Parse { line, field, .. } = &err else {
        panic!("unexpected error {err}")
    };
    assert_eq!(*line, 2);
    assert!(field.contains("stars"), "{err}");
}

#[test]
fn unknown_value_is_rejected() {
    let f = write_lines(&[r#"{"text": "ok", "attributes": {"type": "Cafe", "stars": "9"}}"#]);
    let err = load_records(f.path(), &Schema::toy()).unwrap_err();
    assert!(err.to_string().contains("attributes.stars"), "{err}");
}

#[test]
fn toy_corpus_round_trips_byte_identically() {
    let schema = Schema::toy();
    let records = generate_toy_corpus(42, 2000, &schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_records(&a, &records).unwrap();
    let loaded = load_records(&a, &schema).unwrap();
    assert_eq!(loaded, records);
    save_records(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
