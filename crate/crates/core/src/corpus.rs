//! Labelled text records, control codes, tokenization and dataset splits.
//!
//! A control code is the rendered categorical prefix of a record, e.g.
//! `Business Type: Restaurant | Review Stars: 3.0`, followed by a reserved
//! separator token. Training examples are `code + separator + text + EOS`;
//! generation prompts are `code + separator` alone.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

pub type TokenId = u32;

pub const VOCAB_FORMAT_VERSION: u32 = 1;
pub const SCHEMA_FORMAT_VERSION: u32 = 1;

const PAD: &str = "<pad>";
const EOS: &str = "<eos>";
const SEP: &str = "<sep>";

/// Printable characters covered by the character-level tokenizer.
pub const CHARSET: &str =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,:;|!?'\"-()/&%";

/// Character-level vocabulary with three reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    symbols: Vec<String>,
    ids: HashMap<char, TokenId>,
    pad: TokenId,
    eos: TokenId,
    sep: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    version: u32,
    symbols: Vec<String>,
    pad: TokenId,
    eos: TokenId,
    sep: TokenId,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported vocabulary version {}", file.version),
            ));
        }
        let reserved = [file.pad, file.eos, file.sep];
        let n = file.symbols.len();
        if reserved.iter().any(|&id| id as usize >= n)
            || file.pad == file.eos
            || file.pad == file.sep
            || file.eos == file.sep
        {
            return Err(Error::config(
                "reserved",
                "reserved ids must be distinct and in range",
            ));
        }
        let mut ids = HashMap::new();
        for (id, sym) in file.symbols.iter().enumerate() {
            if reserved.contains(&(id as TokenId)) {
                continue;
            }
            let mut chars = sym.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(Error::config(
                        format!("symbols[{id}]"),
                        "non-reserved symbols must be single characters",
                    ))
                }
            };
            if ids.insert(c, id as TokenId).is_some() {
                return Err(Error::config(format!("symbols[{id}]"), "duplicate symbol"));
            }
        }
        Ok(Vocabulary {
            symbols: file.symbols,
            ids,
            pad: file.pad,
            eos: file.eos,
            sep: file.sep,
        })
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            version: VOCAB_FORMAT_VERSION,
            symbols: v.symbols,
            pad: v.pad,
            eos: v.eos,
            sep: v.sep,
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_charset(CHARSET)
    }
}

impl Vocabulary {
    /// Reserved ids 0, 1, 2 (pad, end-of-sequence, control separator), then
    /// one id per distinct character of `charset` in order.
    pub fn from_charset(charset: &str) -> Self {
        let mut symbols: Vec<String> = vec![PAD.into(), EOS.into(), SEP.into()];
        let mut ids = HashMap::new();
        for c in charset.chars() {
            if let Entry::Vacant(e) = ids.entry(c) {
                e.insert(symbols.len() as TokenId);
                symbols.push(c.to_string());
            }
        }
        Vocabulary {
            symbols,
            ids,
            pad: 0,
            eos: 1,
            sep: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn sep_id(&self) -> TokenId {
        self.sep
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id == self.pad || id == self.eos || id == self.sep
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| self.ids.get(&c).copied().ok_or(Error::OutOfVocabulary(c)))
            .collect()
    }

    /// Reserved ids render as `<pad>`, `<eos>`, `<sep>`; none of those
    /// characters are in the default charset, so the rendering is unambiguous.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(tokens.len());
        for &t in tokens {
            let sym = self.symbol(t).ok_or(Error::TokenOutOfRange {
                id: t,
                vocab_size: self.len(),
            })?;
            out.push_str(sym);
        }
        Ok(out)
    }
}

/// One categorical attribute: the key used in records, the display name used
/// in the rendered control code, and its finite value alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub display: String,
    pub values: Vec<String>,
    /// Sampling marginals used by the toy generator. Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl AttributeSpec {
    pub fn new(name: &str, display: &str, values: &[&str], weights: Option<&[f64]>) -> Self {
        AttributeSpec {
            name: name.into(),
            display: display.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            weights: weights.map(<[f64]>::to_vec),
        }
    }

    /// Normalized marginal distribution over `values`.
    pub fn marginals(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total).collect()
            }
            None => vec![1.0 / self.values.len() as f64; self.values.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub version: u32,
    pub attributes: Vec<AttributeSpec>,
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self> {
        let schema = Schema {
            version: SCHEMA_FORMAT_VERSION,
            attributes,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_FORMAT_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported schema version {}", self.version),
            ));
        }
        if self.attributes.is_empty() {
            return Err(Error::config(
                "attributes",
                "schema needs at least one attribute",
            ));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(Error::config(
                    format!("attributes[{i}].values"),
                    "empty value alphabet",
                ));
            }
            if let Some(w) = &a.weights {
                if w.len() != a.values.len()
                    || w.iter().any(|x| !x.is_finite() || *x < 0.0)
                    || w.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::config(
                        format!("attributes[{i}].weights"),
                        "weights must be non-negative, finite, not all zero, one per value",
                    ));
                }
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::config(
                    format!("attributes[{i}].name"),
                    "duplicate attribute",
                ));
            }
        }
        Ok(())
    }

    /// Yelp-style schema: `Business Type: Restaurant | Review Stars: 3.0`.
    pub fn reviews() -> Self {
        Schema::new(vec![
            AttributeSpec::new(
                "type",
                "Business Type",
                &["Restaurant", "Cafe", "Bar", "Bakery", "Hotel"],
                None,
            ),
            AttributeSpec::new(
                "stars",
                "Review Stars",
                &["1.0", "2.0", "3.0", "4.0", "5.0"],
                None,
            ),
        ])
        .expect("built-in schema is valid")
    }

    /// Compact schema used by the toy corpus; short display names leave room
    /// for content inside a 64-character window.
    pub fn toy() -> Self {
        Schema::new(vec![
            AttributeSpec::new(
                "type",
                "Type",
                &["Cafe", "Bar", "Diner", "Bakery"],
                Some(&[0.4, 0.3, 0.2, 0.1]),
            ),
            AttributeSpec::new(
                "stars",
                "Stars",
                &["1", "2", "3", "4", "5"],
                Some(&[0.1, 0.1, 0.2, 0.3, 0.3]),
            ),
        ])
        .expect("built-in schema is valid")
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub attributes: BTreeMap<String, String>,
}

impl Record {
    /// Checks every schema attribute is present with a declared value and no
    /// undeclared attribute is present.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for spec in &schema.attributes {
            let value = self
                .attributes
                .get(&spec.name)
                .ok_or_else(|| Error::MissingAttribute(spec.name.clone()))?;
            if !spec.values.iter().any(|v| v == value) {
                return Err(Error::UnknownAttributeValue {
                    attribute: spec.name.clone(),
                    value: value.clone(),
                });
            }
        }
        if let Some(extra) = self
            .attributes
            .keys()
            .find(|k| schema.attribute(k).is_none())
        {
            return Err(Error::UnknownAttributeValue {
                attribute: extra.clone(),
                value: self.attributes[extra].clone(),
            });
        }
        Ok(())
    }
}

/// A record's attributes together with their rendered token prefix, which
/// always ends with exactly one separator token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlCode {
    pub attributes: BTreeMap<String, String>,
    pub rendered: Vec<TokenId>,
}

impl ControlCode {
    /// Index of the first content token in a sequence prompted by this code.
    pub fn boundary(&self) -> usize {
        self.rendered.len()
    }
}

/// Token sequence `code + separator + content`, where `boundary` indexes the
/// first content token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedExample {
    pub tokens: Vec<TokenId>,
    pub boundary: usize,
}

impl PreparedExample {
    pub fn new(tokens: Vec<TokenId>, boundary: usize, sep: TokenId) -> Result<Self> {
        if boundary == 0 || boundary > tokens.len() || tokens[boundary - 1] != sep {
            return Err(Error::InvalidArgument(format!(
                "boundary {boundary} is not just past a separator in a sequence of length {}",
                tokens.len()
            )));
        }
        Ok(PreparedExample { tokens, boundary })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Model inputs: every token but the last.
    pub fn inputs(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }

    /// Next-token targets, aligned with `inputs()`.
    pub fn targets(&self) -> &[TokenId] {
        &self.tokens[1.min(self.tokens.len())..]
    }

    /// Number of content tokens that are prediction targets.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - self.boundary
    }
}

pub fn render_control_text(
    attributes: &BTreeMap<String, String>,
    schema: &Schema,
) -> Result<String> {
    let parts = schema
        .attributes
        .iter()
        .map(|spec| {
            attributes
                .get(&spec.name)
                .map(|v| format!("{}: {}", spec.display, v))
                .ok_or_else(|| Error::MissingAttribute(spec.name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" | "))
}

pub fn render_control_code(
    record: &Record,
    schema: &Schema,
    vocab: &Vocabulary,
) -> Result<ControlCode> {
    code_for_attributes(&record.attributes, schema, vocab)
}

pub fn code_for_attributes(
    attributes: &BTreeMap<String, String>,
    schema: &Schema,
    vocab: &Vocabulary,
) -> Result<ControlCode> {
    let text = render_control_text(attributes, schema)?;
    let mut rendered = vocab.encode(&text)?;
    rendered.push(vocab.sep_id());
    let attributes = schema
        .attributes
        .iter()
        .map(|s| (s.name.clone(), attributes[&s.name].clone()))
        .collect();
    Ok(ControlCode {
        attributes,
        rendered,
    })
}

/// Prepends each record's control code and tokenizes, truncating to
/// `max_len` tokens. Non-empty content is terminated by EOS.
pub fn prepend_and_tokenize(
    records: &[Record],
    schema: &Schema,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<PreparedExample>> {
    records
        .iter()
        .map(|r| {
            let code = render_control_code(r, schema, vocab)?;
            if code.rendered.len() > max_len {
                return Err(Error::InvalidArgument(format!(
                    "control code of {} tokens exceeds maximum length {max_len}",
                    code.rendered.len()
                )));
            }
            let boundary = code.rendered.len();
            let mut tokens = code.rendered;
            if !r.text.is_empty() {
                tokens.extend(vocab.encode(&r.text)?);
                tokens.push(vocab.eos_id());
            }
            tokens.truncate(max_len);
            Ok(PreparedExample { tokens, boundary })
        })
        .collect()
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<serde_json::Value>,
    attributes: Option<serde_json::Map<String, serde_json::Value>>,
}

fn parse_line(line: &str, lineno: usize, schema: &Schema) -> Result<Record> {
    let parse_err = |field: &str, message: String| Error::Parse {
        line: lineno,
        field: field.to_string(),
        message,
    };
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| parse_err("<line>", e.to_string()))?;
    let text = match raw.text {
        Some(serde_json::Value::String(s)) if !s.is_empty() => s,
        Some(serde_json::Value::String(_)) => return Err(parse_err("text", "empty text".into())),
        Some(_) => return Err(parse_err("text", "expected a string".into())),
        None => return Err(parse_err("text", "missing".into())),
    };
    let raw_attrs = raw
        .attributes
        .ok_or_else(|| parse_err("attributes", "missing".into()))?;
    let mut attributes = BTreeMap::new();
    for (k, v) in raw_attrs {
        let field = format!("attributes.{k}");
        let Some(spec) = schema.attribute(&k) else {
            return Err(parse_err(&field, "attribute not declared in schema".into()));
        };
        let value = match v {
            serde_json::Value::String(s) => s,
            _ => return Err(parse_err(&field, "expected a string value".into())),
        };
        if !spec.values.contains(&value) {
            return Err(parse_err(&field, format!("unknown value `{value}`")));
        }
        attributes.insert(k, value);
    }
    for spec in &schema.attributes {
        if !attributes.contains_key(&spec.name) {
            return Err(parse_err(
                &format!("attributes.{}", spec.name),
                format!("missing required attribute `{}`", spec.name),
            ));
        }
    }
    Ok(Record { text, attributes })
}

/// Reads JSON-lines records: `{"text": ..., "attributes": {name: value}}`.
/// Line numbers in errors are 1-based; blank lines are skipped.
pub fn load_records(path: &Path, schema: &Schema) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1, schema)?);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn sample_index<R: rand::Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn pick<'a, R: rand::Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

/// Noun vocabulary keyed by the `type` attribute.
fn toy_nouns(kind: &str) -> &'static [&'static str] {
    match kind {
        "Cafe" => &["latte", "coffee", "muffin", "espresso", "tea"],
        "Bar" => &["beer", "wine", "cocktail", "ale", "whiskey"],
        "Diner" => &["burger", "pancakes", "fries", "omelet", "shake"],
        "Bakery" => &["bread", "croissant", "cake", "bagel", "pie"],
        _ => &["food", "place", "menu"],
    }
}

/// Adjective and verdict vocabularies keyed by the `stars` attribute.
fn toy_sentiment(stars: &str) -> (&'static [&'static str], &'static [&'static str]) {
    match stars {
        "1" => (
            &["awful", "cold", "stale", "gross"],
            &["never again", "avoid it"],
        ),
        "2" => (
            &["bland", "meh", "soggy", "pricey"],
            &["not great", "skip it"],
        ),
        "3" => (
            &["okay", "decent", "fine", "average"],
            &["it was ok", "maybe again"],
        ),
        "4" => (
            &["good", "tasty", "fresh", "nice"],
            &["will return", "recommended"],
        ),
        "5" => (
            &["amazing", "perfect", "superb", "great"],
            &["love it", "must visit"],
        ),
        _ => (&["plain"], &["no comment"]),
    }
}

fn toy_text<R: rand::Rng>(rng: &mut R, attributes: &BTreeMap<String, String>) -> String {
    let kind = attributes.get("type").map(String::as_str).unwrap_or("");
    let stars = attributes.get("stars").map(String::as_str).unwrap_or("");
    let noun = pick(rng, toy_nouns(kind));
    let (adjectives, verdicts) = toy_sentiment(stars);
    let adj = pick(rng, adjectives);
    let verdict = pick(rng, verdicts);
    match rng.random_range(0..3) {
        0 => format!("the {noun} was {adj}. {verdict}."),
        1 => format!("{adj} {noun}, {verdict}."),
        _ => format!("{verdict}! {adj} {noun}."),
    }
}

/// Deterministic toy corpus. Attributes are drawn independently from each
/// attribute's marginals; the text is a template whose noun depends on `type`
/// and whose adjective and verdict depend on `stars`. Attributes outside the
/// toy grammar fall back to generic words.
pub fn generate_toy_corpus(seed: u64, n: usize, schema: &Schema) -> Result<Vec<Record>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "toy corpus size must be at least 1".into(),
        ));
    }
    schema.validate()?;
    let mut rng = rng_from_seed(seed);
    let marginals: Vec<Vec<f64>> = schema
        .attributes
        .iter()
        .map(AttributeSpec::marginals)
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let attributes: BTreeMap<String, String> = schema
            .attributes
            .iter()
            .zip(&marginals)
            .map(|(spec, probs)| {
                (
                    spec.name.clone(),
                    spec.values[sample_index(&mut rng, probs)].clone(),
                )
            })
            .collect();
        let text = toy_text(&mut rng, &attributes);
        out.push(Record { text, attributes });
    }
    Ok(out)
}

/// Draws `n` codes uniformly with replacement, so the sample follows the
/// empirical code distribution of `codes`.
pub fn subsample_control_codes(
    codes: &[ControlCode],
    n: usize,
    seed: u64,
) -> Result<Vec<ControlCode>> {
    if codes.is_empty() {
        return Err(Error::InvalidArgument(
            "no control codes to subsample".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "subsample size must be at least 1".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|_| codes[rng.random_range(0..codes.len())].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles with `seed` and cuts into train/validation/test. Validation and
/// test sizes are `round(fraction * n)`; train takes the rest.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<Splits<T>> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    for (name, f, size) in [
        ("train", fractions[0], n_train),
        ("validation", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if size == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name} split is empty ({n} items at fraction {f})"
            )));
        }
    }
    if n_train + n_val + n_test != n {
        return Err(Error::InvalidArgument(
            "split sizes exceed the dataset".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
