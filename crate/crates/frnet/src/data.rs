//! Data ingestion: delimited records to indexed instances.
//!
//! Input files are header-bearing delimited text, first column `label`,
//! one categorical token per remaining column. Vocabularies are built on
//! the training portion only; tokens seen fewer than `min_feature_count`
//! times fold into a reserved per-field unknown slot at index 0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token standing in for an absent value; subject to folding like any other.
pub const MISSING_TOKEN: &str = "⟨missing⟩";
/// Pseudo-token holding the reserved index 0 of every field.
pub const UNKNOWN_TOKEN: &str = "⟨unknown⟩";

/// One parsed input line: a 0/1 label and one raw token per field.
#[derive(Clone, Debug)]
pub struct RawRecord {
    pub label: u8,
    pub tokens: Vec<String>,
}

/// A whole delimited file: the field names from the header plus its records.
#[derive(Clone, Debug)]
pub struct RawData {
    pub fields: Vec<String>,
    pub records: Vec<RawRecord>,
}

/// Reads a delimited file. The first header column must be `label`; empty
/// tokens become [`MISSING_TOKEN`].
pub fn read_delimited(path: &Path, delimiter: char) -> Result<RawData> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Data(format!("{} is empty", path.display()))),
    };
    let mut cols = header.split(delimiter);
    match cols.next() {
        Some(c) if c.trim() == "label" => {}
        _ => {
            return Err(Error::Data(format!(
                "{}: first header column must be `label`",
                path.display()
            )))
        }
    }
    let fields: Vec<String> = cols.map(|c| c.trim().to_string()).collect();
    if fields.is_empty() {
        return Err(Error::Data(format!(
            "{}: no feature columns after `label`",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(delimiter);
        let label_tok = parts.next().unwrap_or("").trim();
        let label = parse_label(label_tok).ok_or_else(|| {
            Error::Data(format!(
                "{} line {}: label `{label_tok}` is not 0 or 1",
                path.display(),
                lineno + 2
            ))
        })?;
        let tokens: Vec<String> = parts
            .map(|t| {
                let t = t.trim();
                if t.is_empty() {
                    MISSING_TOKEN.to_string()
                } else {
                    t.to_string()
                }
            })
            .collect();
        if tokens.len() != fields.len() {
            return Err(Error::Data(format!(
                "{} line {}: expected {} feature columns, got {}",
                path.display(),
                lineno + 2,
                fields.len(),
                tokens.len()
            )));
        }
        records.push(RawRecord { label, tokens });
    }
    Ok(RawData { fields, records })
}

fn parse_label(tok: &str) -> Option<u8> {
    match tok {
        "0" => Some(0),
        "1" => Some(1),
        _ => match tok.parse::<f64>() {
            Ok(v) if v == 0.0 => Some(0),
            Ok(v) if v == 1.0 => Some(1),
            _ => None,
        },
    }
}

/// Log-discretization of a nonnegative numeric value into a token:
/// missing stays [`MISSING_TOKEN`], values above 2 become
/// `floor(ln(v)^2)`, small values round to the nearest integer.
pub fn discretize_numeric(v: Option<f64>) -> Result<String> {
    match v {
        None => Ok(MISSING_TOKEN.to_string()),
        Some(v) if v < 0.0 => Err(Error::Data(format!(
            "negative value {v} cannot be discretized"
        ))),
        Some(v) if v > 2.0 => Ok(format!("{}", (v.ln() * v.ln()).floor() as i64)),
        Some(v) => Ok(format!("{}", v.round() as i64)),
    }
}

/// Applies [`discretize_numeric`] in place to the named columns.
pub fn discretize_columns(raw: &mut RawData, columns: &[String]) -> Result<()> {
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            raw.fields
                .iter()
                .position(|f| f == c)
                .ok_or_else(|| Error::Config(format!("unknown numeric column `{c}`")))
        })
        .collect::<Result<_>>()?;
    for (ri, rec) in raw.records.iter_mut().enumerate() {
        for &i in &idx {
            let tok = &rec.tokens[i];
            let parsed = if tok == MISSING_TOKEN {
                None
            } else {
                Some(tok.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "record {ri}: column `{}` value `{tok}` is not numeric",
                        raw.fields[i]
                    ))
                })?)
            };
            rec.tokens[i] = discretize_numeric(parsed)
                .map_err(|e| Error::Data(format!("record {ri}: {e}")))?;
        }
    }
    Ok(())
}

// ── vocabularies ────────────────────────────────────────────────────────

/// Token table of one field. Index 0 is the unknown slot; the remaining
/// indices follow first-seen order over the training records.
#[derive(Clone, Debug)]
pub struct FieldVocab {
    pub field: String,
    tokens: Vec<String>,
    counts: Vec<u64>,
    map: HashMap<String, u32>,
}

impl FieldVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the unknown slot always exists
    }

    /// Within-field index; unseen or folded tokens map to the unknown slot.
    pub fn lookup(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, index: u32) -> &str {
        &self.tokens[index as usize]
    }

    pub fn count(&self, index: u32) -> u64 {
        self.counts[index as usize]
    }
}

/// All field vocabularies plus the global index layout
/// (`global = offset[field] + within`).
#[derive(Clone, Debug)]
pub struct Vocab {
    pub fields: Vec<FieldVocab>,
    offsets: Vec<u32>,
    n_features: usize,
}

impl Vocab {
    /// Counts tokens over `records` (the training portion) and assigns
    /// indices in first-seen order; tokens below `min_feature_count` fold
    /// into the unknown slot.
    pub fn build(fields: &[String], records: &[RawRecord], min_feature_count: u64) -> Result<Self> {
        let f = fields.len();
        let mut counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); f];
        let mut order: Vec<Vec<String>> = vec![Vec::new(); f];
        for (ri, rec) in records.iter().enumerate() {
            if rec.tokens.len() != f {
                return Err(Error::Data(format!(
                    "record {ri} has {} tokens for {} fields",
                    rec.tokens.len(),
                    f
                )));
            }
            for (fi, tok) in rec.tokens.iter().enumerate() {
                let e = counts[fi].entry(tok.clone()).or_insert(0);
                if *e == 0 {
                    order[fi].push(tok.clone());
                }
                *e += 1;
            }
        }
        let mut field_vocabs = Vec::with_capacity(f);
        for (fi, name) in fields.iter().enumerate() {
            let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
            let mut kept_counts = vec![0u64];
            let mut map = HashMap::new();
            for tok in order[fi].drain(..) {
                let c = counts[fi][&tok];
                if c >= min_feature_count {
                    map.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                    kept_counts.push(c);
                } else {
                    kept_counts[0] += c;
                }
            }
            field_vocabs.push(FieldVocab {
                field: name.clone(),
                tokens,
                counts: kept_counts,
                map,
            });
        }
        Ok(Self::from_fields(field_vocabs))
    }

    fn from_fields(fields: Vec<FieldVocab>) -> Self {
        let mut offsets = Vec::with_capacity(fields.len());
        let mut acc = 0u32;
        for fv in &fields {
            offsets.push(acc);
            acc += fv.len() as u32;
        }
        Vocab {
            fields,
            offsets,
            n_features: acc as usize,
        }
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// Total feature count: the sum of per-field vocabulary sizes.
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn global_index(&self, field: usize, within: u32) -> u32 {
        self.offsets[field] + within
    }

    /// Field owning a global feature index.
    pub fn field_of(&self, global: u32) -> usize {
        match self.offsets.binary_search(&global) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    pub fn encode(&self, rec: &RawRecord) -> Result<Instance> {
        if rec.tokens.len() != self.fields.len() {
            return Err(Error::Data(format!(
                "record has {} tokens for {} fields",
                rec.tokens.len(),
                self.fields.len()
            )));
        }
        let features = rec
            .tokens
            .iter()
            .enumerate()
            .map(|(fi, tok)| self.offsets[fi] + self.fields[fi].lookup(tok))
            .collect();
        Ok(Instance {
            label: rec.label,
            features,
        })
    }

    /// Tab-separated dump, one line per kept token: field, token, global
    /// index, training count. Round-trips through [`Vocab::parse_dump`].
    pub fn dump(&self) -> Result<String> {
        let mut out = String::from("field\ttoken\tindex\tcount\n");
        for (fi, fv) in self.fields.iter().enumerate() {
            for (wi, tok) in fv.tokens.iter().enumerate() {
                if tok.contains('\t') || fv.field.contains('\t') {
                    return Err(Error::Data(format!(
                        "token `{tok}` in field `{}` contains a tab; cannot dump",
                        fv.field
                    )));
                }
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    fv.field,
                    tok,
                    self.offsets[fi] + wi as u32,
                    fv.counts[wi]
                );
            }
        }
        Ok(out)
    }

    /// Rebuilds a vocabulary from a [`Vocab::dump`] file.
    pub fn parse_dump<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        match lines.next() {
            Some(Ok(h)) if h == "field\ttoken\tindex\tcount" => {}
            _ => return Err(Error::Data("vocab dump missing header".into())),
        }
        let mut fields: Vec<FieldVocab> = Vec::new();
        let mut expect_index = 0u32;
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [field, token, index, count] = parts.as_slice() else {
                return Err(Error::Data(format!("vocab dump line {}: bad layout", ln + 2)));
            };
            let index: u32 = index
                .parse()
                .map_err(|_| Error::Data(format!("vocab dump line {}: bad index", ln + 2)))?;
            if index != expect_index {
                return Err(Error::Data(format!(
                    "vocab dump line {}: indices must be contiguous",
                    ln + 2
                )));
            }
            expect_index += 1;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::Data(format!("vocab dump line {}: bad count", ln + 2)))?;
            let start_new = fields.last().map(|f| f.field != *field).unwrap_or(true);
            if start_new {
                if *token != UNKNOWN_TOKEN {
                    return Err(Error::Data(format!(
                        "vocab dump line {}: field `{field}` must start with {UNKNOWN_TOKEN}",
                        ln + 2
                    )));
                }
                fields.push(FieldVocab {
                    field: field.to_string(),
                    tokens: vec![token.to_string()],
                    counts: vec![count],
                    map: HashMap::new(),
                });
            } else {
                let fv = fields.last_mut().unwrap();
                let within = fv.tokens.len() as u32;
                fv.map.insert(token.to_string(), within);
                fv.tokens.push(token.to_string());
                fv.counts.push(count);
            }
        }
        if fields.is_empty() {
            return Err(Error::Data("vocab dump holds no fields".into()));
        }
        Ok(Self::from_fields(fields))
    }
}

// ── instances and datasets ──────────────────────────────────────────────

/// One training example: a 0/1 label and one global feature index per field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub label: u8,
    pub features: Vec<u32>,
}

/// Encoded instances sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Arc<Vocab>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn field_count(&self) -> usize {
        self.vocab.field_count()
    }

    pub fn n_features(&self) -> usize {
        self.vocab.n_features()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

/// Train/val/test datasets over one shared vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Cut sizes for an `a:b:c` split: cumulative boundaries are rounded up,
/// so 288,609 records at 7:2:1 give 202,027 / 57,722 / 28,860.
pub fn split_sizes(n: usize, ratios: (u32, u32, u32)) -> (usize, usize, usize) {
    let total = (ratios.0 + ratios.1 + ratios.2) as f64;
    let cut1 = ((n as f64) * (ratios.0 as f64) / total).ceil() as usize;
    let cut2 = ((n as f64) * ((ratios.0 + ratios.1) as f64) / total).ceil() as usize;
    let cut1 = cut1.min(n);
    let cut2 = cut2.clamp(cut1, n);
    (cut1, cut2 - cut1, n - cut2)
}

/// Seeded subsample without replacement; returns the input unchanged when
/// it is already small enough.
pub fn sample_instances(mut instances: Vec<Instance>, n: usize, seed: u64) -> Vec<Instance> {
    if instances.len() > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        instances.shuffle(&mut rng);
        instances.truncate(n);
    }
    instances
}

/// Seeded shuffle followed by the [`split_sizes`] cuts. The same seed
/// always yields the same partition.
pub fn split_records(
    mut records: Vec<RawRecord>,
    ratios: (u32, u32, u32),
    seed: u64,
) -> (Vec<RawRecord>, Vec<RawRecord>, Vec<RawRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(records.len(), ratios);
    let mut rest = records.split_off(n_train);
    let test = rest.split_off(n_val);
    (records, rest, test)
}

/// One-file pipeline: split, build the vocabulary on the training cut,
/// encode all three partitions against it.
pub fn prepare_split(
    raw: RawData,
    ratios: (u32, u32, u32),
    seed: u64,
    min_feature_count: u64,
) -> Result<Prepared> {
    let RawData { fields, records } = raw;
    let (train, val, test) = split_records(records, ratios, seed);
    encode_all(&fields, train, val, test, min_feature_count)
}

/// Explicit-file pipeline: no shuffling, vocabulary from the training file.
pub fn prepare_files(
    train: RawData,
    val: RawData,
    test: RawData,
    min_feature_count: u64,
) -> Result<Prepared> {
    if train.fields != val.fields || train.fields != test.fields {
        return Err(Error::Data(
            "train/val/test files disagree on field columns".into(),
        ));
    }
    let fields = train.fields.clone();
    encode_all(&fields, train.records, val.records, test.records, min_feature_count)
}

fn encode_all(
    fields: &[String],
    train: Vec<RawRecord>,
    val: Vec<RawRecord>,
    test: Vec<RawRecord>,
    min_feature_count: u64,
) -> Result<Prepared> {
    let vocab = Arc::new(Vocab::build(fields, &train, min_feature_count)?);
    let encode = |records: Vec<RawRecord>| -> Result<Dataset> {
        let instances = records
            .iter()
            .map(|r| vocab.encode(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            vocab: Arc::clone(&vocab),
            instances,
        })
    };
    Ok(Prepared {
        train: encode(train)?,
        val: encode(val)?,
        test: encode(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: u8, tokens: &[&str]) -> RawRecord {
        RawRecord {
            label,
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn discretize_rules() {
        assert_eq!(discretize_numeric(None).unwrap(), MISSING_TOKEN);
        assert_eq!(discretize_numeric(Some(2.0)).unwrap(), "2");
        // ln(100)^2 = 21.2076 -> 21
        assert_eq!(discretize_numeric(Some(100.0)).unwrap(), "21");
        assert!(discretize_numeric(Some(-1.0)).is_err());
    }

    #[test]
    fn folding_thresholds() {
        let fields = vec!["f".to_string()];
        let mut records = Vec::new();
        for _ in 0..12 {
            records.push(rec(0, &["a"]));
        }
        for _ in 0..3 {
            records.push(rec(1, &["b"]));
        }
        let v = Vocab::build(&fields, &records, 10).unwrap();
        assert_eq!(v.fields[0].lookup("a"), 1);
        assert_eq!(v.fields[0].lookup("b"), 0); // folded
        assert_eq!(v.fields[0].count(0), 3);

        let v1 = Vocab::build(&fields, &records, 1).unwrap();
        assert_eq!(v1.fields[0].len(), 3); // unknown + a + b

        let nine: Vec<_> = (0..9).map(|_| rec(0, &["only"])).collect();
        let v9 = Vocab::build(&fields, &nine, 10).unwrap();
        assert_eq!(v9.fields[0].len(), 1); // unknown slot alone
        assert_eq!(v9.n_features(), 1);
    }

    #[test]
    fn unseen_tokens_hit_unknown_and_do_not_grow_n() {
        let fields = vec!["a".to_string(), "b".to_string()];
        let train = vec![rec(0, &["x", "y"]), rec(1, &["x", "z"])];
        let v = Vocab::build(&fields, &train, 1).unwrap();
        let n = v.n_features();
        let inst = v.encode(&rec(1, &["never-seen", "y"])).unwrap();
        assert_eq!(inst.features[0], v.global_index(0, 0));
        assert_eq!(v.n_features(), n);
        // Re-encoding is stable.
        assert_eq!(inst, v.encode(&rec(1, &["never-seen", "y"])).unwrap());
    }

    #[test]
    fn ragged_record_is_rejected() {
        let fields = vec!["a".to_string(), "b".to_string()];
        let train = vec![rec(0, &["x", "y"]), rec(1, &["x"])];
        assert!(Vocab::build(&fields, &train, 1).is_err());
    }

    #[test]
    fn split_matches_published_sizes() {
        assert_eq!(split_sizes(288_609, (7, 2, 1)), (202_027, 57_722, 28_860));
        assert_eq!(split_sizes(10, (7, 2, 1)), (7, 2, 1));
        let (a, b, c) = split_sizes(1, (7, 2, 1));
        assert_eq!(a + b + c, 1);
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let records: Vec<RawRecord> = (0..100)
            .map(|i| rec((i % 2) as u8, &[&format!("t{i}")]))
            .collect();
        let (a1, b1, c1) = split_records(records.clone(), (7, 2, 1), 9);
        let (a2, b2, c2) = split_records(records.clone(), (7, 2, 1), 9);
        let key = |r: &RawRecord| r.tokens[0].clone();
        assert_eq!(a1.iter().map(key).collect::<Vec<_>>(), a2.iter().map(key).collect::<Vec<_>>());
        assert_eq!(b1.len(), b2.len());
        assert_eq!(c1.iter().map(key).collect::<Vec<_>>(), c2.iter().map(key).collect::<Vec<_>>());

        let mut all: Vec<String> = a1.iter().chain(&b1).chain(&c1).map(key).collect();
        all.sort();
        let mut expect: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn vocab_dump_round_trips() {
        let fields = vec!["a".to_string(), "b".to_string()];
        let train = vec![rec(0, &["x", "y"]), rec(1, &["x", "z"]), rec(0, &["w", "y"])];
        let v = Vocab::build(&fields, &train, 1).unwrap();
        let dump = v.dump().unwrap();
        let v2 = Vocab::parse_dump(dump.as_bytes()).unwrap();
        assert_eq!(v2.n_features(), v.n_features());
        let r = rec(0, &["w", "z"]);
        assert_eq!(v.encode(&r).unwrap(), v2.encode(&r).unwrap());
    }
}
