//! MeSH-style descriptors, Tree Numbers and the decoder output vocabulary.
//!
//! A Tree Number such as `C01.748.214` is a dotted path: the first segment is a
//! branch letter followed by two digits, every further segment is three digits.
//! The decoder vocabulary has one token per letter, per two-digit code and per
//! three-digit code, plus four reserved symbols.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use thiserror::Error;

/// Deepest Tree Number accepted (MeSH goes "up to a depth of fifteen").
pub const MAX_DEPTH: usize = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThesaurusError {
    #[error("malformed tree number {text:?}: {reason}")]
    MalformedTreeNumber { text: String, reason: &'static str },
    #[error("unknown vocabulary token {0:?}")]
    UnknownToken(String),
    #[error("vocabulary id {0} out of range")]
    UnknownTokenId(u32),
    #[error("duplicate descriptor id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("tree number {tree_number} assigned to both {first:?} and {second:?} (line {line})")]
    DuplicateTreeNumber {
        tree_number: String,
        first: String,
        second: String,
        line: usize,
    },
    #[error("{} malformed record(s): {}", .0.len(), summarize(.0))]
    MalformedRecords(Vec<MalformedLine>),
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("token sequence is not a well-formed tree number")]
    IllFormedSequence,
    #[error("io error: {0}")]
    Io(String),
}

fn summarize(lines: &[MalformedLine]) -> String {
    lines
        .iter()
        .map(|l| format!("line {}: {}", l.line, l.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

/// One Tree Number: an ordered list of segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeNumber {
    segments: Vec<String>,
}

impl TreeNumber {
    pub fn parse(text: &str) -> Result<Self, ThesaurusError> {
        let bad = |reason| ThesaurusError::MalformedTreeNumber {
            text: text.to_string(),
            reason,
        };
        if text.is_empty() {
            return Err(bad("empty"));
        }
        let mut segments = Vec::new();
        for (i, seg) in text.split('.').enumerate() {
            if seg.is_empty() {
                return Err(bad("empty segment"));
            }
            let b = seg.as_bytes();
            if i == 0 {
                if b.len() != 3
                    || !b[0].is_ascii_uppercase()
                    || !b[1].is_ascii_digit()
                    || !b[2].is_ascii_digit()
                {
                    return Err(bad("first segment must be a letter followed by two digits"));
                }
            } else if b.len() != 3 || !b.iter().all(u8::is_ascii_digit) {
                return Err(bad("inner segments must be three digits"));
            }
            segments.push(seg.to_string());
        }
        if segments.len() > MAX_DEPTH {
            return Err(bad("deeper than fifteen segments"));
        }
        Ok(TreeNumber { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    /// Top-level branch letter, e.g. `C` for `C01.748`.
    pub fn branch(&self) -> char {
        self.segments[0].as_bytes()[0] as char
    }

    /// Prefix with `len` segments (`1 ..= depth`).
    pub fn prefix(&self, len: usize) -> TreeNumber {
        assert!(len >= 1 && len <= self.depth());
        TreeNumber {
            segments: self.segments[..len].to_vec(),
        }
    }

    /// Proper prefixes, shortest first.
    pub fn proper_prefixes(&self) -> impl Iterator<Item = TreeNumber> + '_ {
        (1..self.depth()).map(move |n| self.prefix(n))
    }

    /// Key of the parent position: the prefix one segment shorter, or the
    /// bare branch letter for a single-segment number.
    pub fn parent_key(&self) -> String {
        if self.depth() == 1 {
            self.branch().to_string()
        } else {
            self.prefix(self.depth() - 1).to_string()
        }
    }

    pub fn tokens(&self) -> Vec<TreeToken> {
        let first = self.segments[0].as_bytes();
        let mut out = Vec::with_capacity(self.depth() + 1);
        out.push(TreeToken::Letter(first[0]));
        out.push(TreeToken::D2((first[1] - b'0') * 10 + (first[2] - b'0')));
        for seg in &self.segments[1..] {
            out.push(TreeToken::D3(seg.parse().expect("validated digits")));
        }
        out
    }

    /// Inverse of [`TreeNumber::tokens`]: `LETTER D2 D3*`.
    pub fn from_tokens(tokens: &[TreeToken]) -> Result<Self, ThesaurusError> {
        let (l, d2) = match tokens {
            [TreeToken::Letter(l), TreeToken::D2(d), ..] => (*l, *d),
            _ => return Err(ThesaurusError::IllFormedSequence),
        };
        let mut segments = vec![format!("{}{:02}", l as char, d2)];
        for t in &tokens[2..] {
            match t {
                TreeToken::D3(v) => segments.push(format!("{v:03}")),
                _ => return Err(ThesaurusError::IllFormedSequence),
            }
        }
        if segments.len() > MAX_DEPTH {
            return Err(ThesaurusError::IllFormedSequence);
        }
        Ok(TreeNumber { segments })
    }
}

impl fmt::Display for TreeNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("."))
    }
}

impl FromStr for TreeNumber {
    type Err = ThesaurusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TreeNumber::parse(s)
    }
}

/// Content token of a Tree Number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeToken {
    /// `A`–`Z`, stored as the ASCII byte.
    Letter(u8),
    /// `00`–`99`.
    D2(u8),
    /// `000`–`999`.
    D3(u16),
}

impl TreeToken {
    pub fn text(&self) -> String {
        match self {
            TreeToken::Letter(b) => (*b as char).to_string(),
            TreeToken::D2(v) => format!("{v:02}"),
            TreeToken::D3(v) => format!("{v:03}"),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ThesaurusError> {
        let b = text.as_bytes();
        let digits = b.iter().all(u8::is_ascii_digit);
        match b.len() {
            1 if b[0].is_ascii_uppercase() => Ok(TreeToken::Letter(b[0])),
            2 if digits => Ok(TreeToken::D2(text.parse().unwrap())),
            3 if digits => Ok(TreeToken::D3(text.parse().unwrap())),
            _ => Err(ThesaurusError::UnknownToken(text.to_string())),
        }
    }
}

/// Decoder vocabulary symbol: a reserved marker or a content token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Bos,
    Eos,
    Pad,
    Dot,
    Token(TreeToken),
}

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const DOT: u32 = 3;
const RESERVED: u32 = 4;
const LETTERS: u32 = 26;
const D2S: u32 = 100;
const D3S: u32 = 1000;
/// Content tokens: 26 letters, 100 two-digit codes, 1000 three-digit codes.
pub const CONTENT_TOKENS: usize = (LETTERS + D2S + D3S) as usize;
/// Full decoder vocabulary including the reserved symbols.
pub const VOCAB_SIZE: usize = CONTENT_TOKENS + RESERVED as usize;

/// Fixed layout: reserved ids, then letters, then `00..99`, then `000..999`.
pub fn vocab_index(symbol: Symbol) -> u32 {
    match symbol {
        Symbol::Bos => BOS,
        Symbol::Eos => EOS,
        Symbol::Pad => PAD,
        Symbol::Dot => DOT,
        Symbol::Token(TreeToken::Letter(b)) => RESERVED + u32::from(b - b'A'),
        Symbol::Token(TreeToken::D2(v)) => RESERVED + LETTERS + u32::from(v),
        Symbol::Token(TreeToken::D3(v)) => RESERVED + LETTERS + D2S + u32::from(v),
    }
}

/// Index of a textual token: `"BOS"`, `"EOS"`, `"PAD"`, `"."` or a content token.
pub fn vocab_index_of_text(text: &str) -> Result<u32, ThesaurusError> {
    let sym = match text {
        "BOS" => Symbol::Bos,
        "EOS" => Symbol::Eos,
        "PAD" => Symbol::Pad,
        "." | "DOT" => Symbol::Dot,
        _ => Symbol::Token(TreeToken::parse(text)?),
    };
    Ok(vocab_index(sym))
}

pub fn vocab_symbol(id: u32) -> Result<Symbol, ThesaurusError> {
    Ok(match id {
        BOS => Symbol::Bos,
        EOS => Symbol::Eos,
        PAD => Symbol::Pad,
        DOT => Symbol::Dot,
        i if i < RESERVED + LETTERS => {
            Symbol::Token(TreeToken::Letter(b'A' + (i - RESERVED) as u8))
        }
        i if i < RESERVED + LETTERS + D2S => {
            Symbol::Token(TreeToken::D2((i - RESERVED - LETTERS) as u8))
        }
        i if i < VOCAB_SIZE as u32 => {
            Symbol::Token(TreeToken::D3((i - RESERVED - LETTERS - D2S) as u16))
        }
        i => return Err(ThesaurusError::UnknownTokenId(i)),
    })
}

/// Decoder target: `BOS`, content tokens with `DOT` between segments, `EOS`.
pub fn target_sequence(tn: &TreeNumber) -> Vec<u32> {
    let tokens = tn.tokens();
    let mut out = Vec::with_capacity(2 * tn.depth() + 2);
    out.push(BOS);
    for (i, t) in tokens.iter().enumerate() {
        if i >= 2 {
            out.push(DOT);
        }
        out.push(vocab_index(Symbol::Token(*t)));
    }
    out.push(EOS);
    out
}

/// Reads a generated id sequence back as a Tree Number. Leading `BOS` and
/// everything from the first `EOS` on are ignored; the remainder must be
/// exactly `LETTER D2 (DOT D3)*`.
pub fn parse_generated(ids: &[u32]) -> Result<TreeNumber, ThesaurusError> {
    let body = match ids.first() {
        Some(&BOS) => &ids[1..],
        _ => ids,
    };
    let end = body.iter().position(|&i| i == EOS).unwrap_or(body.len());
    let body = &body[..end];
    if body.len() < 2 || body.len() % 2 != 0 {
        return Err(ThesaurusError::IllFormedSequence);
    }
    let mut tokens = Vec::with_capacity(body.len());
    for (pos, &id) in body.iter().enumerate() {
        let expect_dot = pos >= 2 && pos % 2 == 0;
        match vocab_symbol(id)? {
            Symbol::Dot if expect_dot => {}
            Symbol::Token(t) if !expect_dot => tokens.push(t),
            _ => return Err(ThesaurusError::IllFormedSequence),
        }
    }
    TreeNumber::from_tokens(&tokens)
}

/// A thesaurus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub label: String,
    pub description: String,
    pub tree_numbers: Vec<TreeNumber>,
}

impl Descriptor {
    /// Mean segment count over the descriptor's Tree Numbers.
    pub fn depth(&self) -> f64 {
        let total: usize = self.tree_numbers.iter().map(TreeNumber::depth).sum();
        total as f64 / self.tree_numbers.len() as f64
    }
}

/// Loader behaviour on bad lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any malformed record fails the load; the error lists every bad line.
    #[default]
    Strict,
    /// Malformed or conflicting records are skipped and reported.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<MalformedLine>,
}

/// Immutable descriptor index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Thesaurus {
    descriptors: BTreeMap<String, Descriptor>,
    tree_index: HashMap<String, String>,
}

impl Thesaurus {
    pub fn from_descriptors(
        descriptors: impl IntoIterator<Item = Descriptor>,
    ) -> Result<Self, ThesaurusError> {
        let mut th = Thesaurus::default();
        for (i, d) in descriptors.into_iter().enumerate() {
            th.insert(d, i + 1)?;
        }
        Ok(th)
    }

    fn insert(&mut self, d: Descriptor, line: usize) -> Result<(), ThesaurusError> {
        if self.descriptors.contains_key(&d.id) {
            return Err(ThesaurusError::DuplicateId { id: d.id, line });
        }
        let mut seen = std::collections::HashSet::new();
        for tn in &d.tree_numbers {
            let key = tn.to_string();
            if let Some(first) = self.tree_index.get(&key) {
                return Err(ThesaurusError::DuplicateTreeNumber {
                    tree_number: key,
                    first: first.clone(),
                    second: d.id.clone(),
                    line,
                });
            }
            if !seen.insert(key.clone()) {
                return Err(ThesaurusError::DuplicateTreeNumber {
                    tree_number: key,
                    first: d.id.clone(),
                    second: d.id.clone(),
                    line,
                });
            }
        }
        for tn in &d.tree_numbers {
            self.tree_index.insert(tn.to_string(), d.id.clone());
        }
        self.descriptors.insert(d.id.clone(), d);
        Ok(())
    }

    /// Loads the tab-separated ingest format:
    /// `id<TAB>label<TAB>description<TAB>tn1;tn2;...`.
    pub fn load<R: BufRead>(reader: R, mode: LoadMode) -> Result<(Self, LoadReport), ThesaurusError> {
        let mut th = Thesaurus::default();
        let mut report = LoadReport::default();
        let mut malformed = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| ThesaurusError::Io(e.to_string()))?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() {
                continue;
            }
            let record = match parse_record(line) {
                Ok(r) => r,
                Err(reason) => {
                    malformed.push(MalformedLine { line: lineno, reason });
                    continue;
                }
            };
            if let Err(e) = th.insert(record, lineno) {
                match mode {
                    LoadMode::Strict => return Err(e),
                    LoadMode::Lenient => report.skipped.push(MalformedLine {
                        line: lineno,
                        reason: e.to_string(),
                    }),
                }
            }
        }
        if !malformed.is_empty() {
            match mode {
                LoadMode::Strict => return Err(ThesaurusError::MalformedRecords(malformed)),
                LoadMode::Lenient => {
                    report.skipped.extend(malformed);
                    report.skipped.sort_by_key(|m| m.line);
                }
            }
        }
        report.loaded = th.len();
        Ok((th, report))
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Descriptor> {
        self.descriptors.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&Descriptor, ThesaurusError> {
        self.get(id)
            .ok_or_else(|| ThesaurusError::UnknownDescriptor(id.to_string()))
    }

    /// Descriptor owning the given Tree Number position.
    pub fn owner(&self, tree_number: &str) -> Option<&str> {
        self.tree_index.get(tree_number).map(String::as_str)
    }

    /// Descriptors in id order.
    pub fn descriptors(&self) -> impl Iterator<Item = &Descriptor> {
        self.descriptors.values()
    }

    pub fn tree_number_count(&self) -> usize {
        self.tree_index.len()
    }

    pub fn write<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in self.descriptors() {
            let tns: Vec<String> = d.tree_numbers.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}\t{}\t{}\t{}", d.id, d.label, d.description, tns.join(";"))?;
        }
        Ok(())
    }
}

fn parse_record(line: &str) -> Result<Descriptor, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let id = fields[0].trim();
    let label = fields[1].trim();
    if id.is_empty() {
        return Err("empty id".into());
    }
    if label.is_empty() {
        return Err("empty label".into());
    }
    let mut tree_numbers = Vec::new();
    for tn in fields[3].split(';').map(str::trim).filter(|s| !s.is_empty()) {
        tree_numbers.push(TreeNumber::parse(tn).map_err(|e| e.to_string())?);
    }
    if tree_numbers.is_empty() {
        return Err("no tree numbers".into());
    }
    Ok(Descriptor {
        id: id.to_string(),
        label: label.to_string(),
        description: fields[2].trim().to_string(),
        tree_numbers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_tree_numbers() {
        let tn = TreeNumber::parse("C01.748.214").unwrap();
        assert_eq!(tn.segments(), ["C01", "748", "214"]);
        assert_eq!(TreeNumber::parse("C01").unwrap().segments(), ["C01"]);
        assert!(TreeNumber::parse("C1.748").is_err());
        assert!(TreeNumber::parse("C01..748").is_err());
        assert!(TreeNumber::parse("c01").is_err());
        assert!(TreeNumber::parse("C01.74").is_err());
        assert!(TreeNumber::parse("C01.7a8").is_err());
        assert!(TreeNumber::parse("").is_err());
        let deep = format!("A01{}", ".001".repeat(15));
        assert!(TreeNumber::parse(&deep).is_err());
    }

    #[test]
    fn tokenizes_segments() {
        let tn = TreeNumber::parse("C01.748.214").unwrap();
        let toks: Vec<String> = tn.tokens().iter().map(TreeToken::text).collect();
        assert_eq!(toks, ["C", "01", "748", "214"]);
        let toks: Vec<String> = TreeNumber::parse("A01").unwrap().tokens().iter().map(TreeToken::text).collect();
        assert_eq!(toks, ["A", "01"]);
        assert_eq!(TreeNumber::from_tokens(&tn.tokens()).unwrap(), tn);
    }

    #[test]
    fn vocabulary_layout() {
        assert_eq!(vocab_index(Symbol::Bos), 0);
        assert_eq!(vocab_index_of_text("A").unwrap(), 4);
        assert_eq!(vocab_index_of_text("00").unwrap(), 30);
        assert_eq!(vocab_index_of_text("999").unwrap(), 1129);
        assert!(vocab_index_of_text("1000").is_err());
        assert!(vocab_index_of_text("a").is_err());
        assert!(vocab_symbol(1130).is_err());
    }

    #[test]
    fn target_and_generated_round_trip() {
        let tn = TreeNumber::parse("C01.748.214").unwrap();
        let t = target_sequence(&tn);
        let expected = [
            BOS,
            vocab_index_of_text("C").unwrap(),
            vocab_index_of_text("01").unwrap(),
            DOT,
            vocab_index_of_text("748").unwrap(),
            DOT,
            vocab_index_of_text("214").unwrap(),
            EOS,
        ];
        assert_eq!(t, expected);
        assert_eq!(parse_generated(&t).unwrap(), tn);
        // missing dot, trailing dot, digit where the letter belongs
        assert!(parse_generated(&[BOS, t[1], t[2], t[4], EOS]).is_err());
        assert!(parse_generated(&[BOS, t[1], t[2], DOT, EOS]).is_err());
        assert!(parse_generated(&[BOS, t[2], t[2], EOS]).is_err());
        assert!(parse_generated(&[BOS, EOS]).is_err());
    }

    #[test]
    fn loads_records_and_rejects_duplicates() {
        let src = "D1\tInfections\tInvasion of the host\tC01\nD2\tCOVID-19\tA disease\tC01.748.214;C08.381\n";
        let (th, rep) = Thesaurus::load(src.as_bytes(), LoadMode::Strict).unwrap();
        assert_eq!(th.len(), 2);
        assert_eq!(rep.loaded, 2);
        assert_eq!(th.owner("C08.381"), Some("D2"));

        let dup = "D1\ta\tb\tC01\nD1\tc\td\tC02\n";
        assert!(matches!(
            Thesaurus::load(dup.as_bytes(), LoadMode::Strict),
            Err(ThesaurusError::DuplicateId { line: 2, .. })
        ));
        let dup_tn = "D1\ta\tb\tC01\nD2\tc\td\tC01\n";
        assert!(matches!(
            Thesaurus::load(dup_tn.as_bytes(), LoadMode::Strict),
            Err(ThesaurusError::DuplicateTreeNumber { .. })
        ));
    }

    #[test]
    fn strict_lists_every_malformed_line_and_lenient_skips() {
        let src = "D1\ta\tb\tC01\nbroken line\nD3\tx\ty\tC1\nD4\tx\ty\tC02\textra\nD5\tok\tz\tC03\n";
        match Thesaurus::load(src.as_bytes(), LoadMode::Strict) {
            Err(ThesaurusError::MalformedRecords(lines)) => {
                assert_eq!(lines.iter().map(|l| l.line).collect::<Vec<_>>(), [2, 3, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let (th, rep) = Thesaurus::load(src.as_bytes(), LoadMode::Lenient).unwrap();
        assert_eq!(th.len(), 2);
        assert_eq!(rep.skipped.len(), 3);
    }

    #[test]
    fn depth_is_mean_over_tree_numbers() {
        let d = Descriptor {
            id: "x".into(),
            label: "x".into(),
            description: String::new(),
            tree_numbers: vec![
                TreeNumber::parse("A01.001").unwrap(),
                TreeNumber::parse("B01.001.002.003").unwrap(),
            ],
        };
        assert_eq!(d.depth(), 3.0);
    }
}
