use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{check_len, Error, Result};
use crate::hashmodel::LabelVector;

const DATA_MAGIC: &[u8; 8] = b"SAATDS\0\0";
const DATA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Database,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Database => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Database),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Database => "database",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "database" => Some(Split::Database),
            _ => None,
        }
    }
}

/// Labelled feature vectors in `[0, 1]^d` with one split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    dim: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<LabelVector>,
    splits: Vec<Split>,
}

fn check_sample(i: usize, x: &[f64], y: &LabelVector, dim: usize, classes: usize) -> std::result::Result<(), String> {
    if x.len() != dim {
        return Err(format!("sample {i}: expected {dim} features, found {}", x.len()));
    }
    if y.len() != classes {
        return Err(format!("sample {i}: expected {classes} label bits, found {}", y.len()));
    }
    if let Some(j) = x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(format!("sample {i}: feature {j} = {} is not in [0, 1]", x[j]));
    }
    if y.is_zero() {
        return Err(format!("sample {i}: label vector has no class set"));
    }
    Ok(())
}

impl DatasetFile {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<LabelVector>, splits: Vec<Split>) -> Result<Self> {
        check_len("dataset labels", features.len(), labels.len())?;
        check_len("dataset splits", features.len(), splits.len())?;
        let dim = features.first().map_or(0, |x| x.len());
        let num_classes = labels.first().map_or(0, |y| y.len());
        for (i, (x, y)) in features.iter().zip(&labels).enumerate() {
            check_sample(i, x, y, dim, num_classes).map_err(Error::InvalidConfig)?;
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[LabelVector] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and labels of one split, in file order.
    pub fn subset(&self, split: Split) -> (Vec<Vec<f64>>, Vec<LabelVector>) {
        let idx = self.indices(split);
        (
            idx.iter().map(|&i| self.features[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i].clone()).collect(),
        )
    }

    /// Reassigns split tags: a seeded shuffle, then the first
    /// `query_fraction` to query, the next `database_fraction` to database
    /// and the rest to train.
    pub fn assign_splits(&mut self, query_fraction: f64, database_fraction: f64, seed: u64) -> Result<()> {
        self.splits = split_tags(self.len(), query_fraction, database_fraction, seed)?;
        Ok(())
    }

    /// Layout: magic, version u32, N u64, d u32, C u32, then per sample a
    /// split tag u8, `d` f64 features and `ceil(C/8)` packed label bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.len() * (1 + self.dim * 8 + self.num_classes.div_ceil(8)));
        out.extend_from_slice(DATA_MAGIC);
        binio::put_u32(&mut out, DATA_VERSION);
        binio::put_u64(&mut out, self.len() as u64);
        binio::put_u32(&mut out, self.dim as u32);
        binio::put_u32(&mut out, self.num_classes as u32);
        for i in 0..self.len() {
            out.push(self.splits[i].tag());
            for &v in &self.features[i] {
                binio::put_f64(&mut out, v);
            }
            binio::pack_bits(self.labels[i].bits().iter().map(|&b| b == 1), self.num_classes, &mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATA_MAGIC)?;
        let version = r.u32()?;
        if version != DATA_VERSION {
            return r.fail(format!("unsupported dataset version {version}"));
        }
        let n = r.len(1)?;
        let dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let mut features = Vec::with_capacity(n.min(1 << 20));
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        let mut splits = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let at = r.offset();
            let split = match Split::from_tag(r.u8()?) {
                Some(s) => s,
                None => return r.fail(format!("sample {i}: unknown split tag")),
            };
            let x = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bits = binio::unpack_bits(r.bytes(num_classes.div_ceil(8))?, num_classes);
            let y = LabelVector::new(bits.into_iter().map(u8::from).collect())?;
            if let Err(message) = check_sample(i, &x, &y, dim, num_classes) {
                return Err(Error::Format { offset: at, message });
            }
            features.push(x);
            labels.push(y);
            splits.push(split);
        }
        r.finish()?;
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            splits,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CSV with header `f0..f{d-1},y0..y{C-1},split`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.extend((0..self.num_classes).map(|c| format!("y{c}")));
        header.push("split".into());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features[i].iter().map(|v| v.to_string()).collect();
            row.extend(self.labels[i].bits().iter().map(|b| b.to_string()));
            row.push(self.splits[i].name().into());
            w.write_record(&row).map_err(csv_io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses CSV with a header naming feature columns `f*`, label columns
    /// `y*` and an optional `split` column. Without a split column the
    /// default 10/70/20 query/database/train split is drawn from `seed`.
    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| parse_err(1, e))?.clone();
        let mut fcols = Vec::new();
        let mut ycols = Vec::new();
        let mut scol = None;
        for (i, h) in header.iter().enumerate() {
            let h = h.trim();
            if h == "split" {
                scol = Some(i);
            } else if h.starts_with('f') {
                fcols.push(i);
            } else if h.starts_with('y') {
                ycols.push(i);
            } else {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unrecognised column `{h}`"),
                });
            }
        }
        if fcols.is_empty() || ycols.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "header needs at least one f* and one y* column".into(),
            });
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let line = r + 2;
            let rec = rec.map_err(|e| parse_err(line, e))?;
            let x = fcols
                .iter()
                .map(|&c| {
                    rec[c].trim().parse::<f64>().map_err(|e| Error::Parse {
                        line,
                        message: format!("column {}: {e}", header[c].trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let bits = ycols
                .iter()
                .map(|&c| match rec[c].trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    v => Err(Error::Parse {
                        line,
                        message: format!("column {}: label bit must be 0 or 1, got `{v}`", header[c].trim()),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            let y = LabelVector::new(bits)?;
            check_sample(r, &x, &y, fcols.len(), ycols.len()).map_err(|message| Error::Parse { line, message })?;
            if let Some(c) = scol {
                splits.push(Split::parse(&rec[c]).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unknown split `{}`", &rec[c]),
                })?);
            }
            features.push(x);
            labels.push(y);
        }
        if scol.is_none() {
            splits = split_tags(features.len(), 0.1, 0.7, seed)?;
        }
        Self::new(features, labels, splits)
    }

    pub fn import_csv(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, seed)
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn split_tags(n: usize, query_fraction: f64, database_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(query_fraction > 0.0 && database_fraction > 0.0 && query_fraction + database_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive and leave room for train, got query {query_fraction}, database {database_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nq = (n as f64 * query_fraction).round() as usize;
    let nd = (n as f64 * database_fraction).round() as usize;
    let mut tags = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < nq {
            tags[i] = Split::Query;
        } else if rank < nq + nd {
            tags[i] = Split::Database;
        }
    }
    Ok(tags)
}

/// Seeded class-prototype benchmark.
///
/// The first `num_classes` feature dimensions form a one-hot simplex with
/// gap `separation`; every remaining dimension carries a random ±1 class
/// pattern at gap `weak_separation`. A sample is its prototype plus
/// Gaussian noise clipped to `[0, 1]`. With probability `multi_label_rate`
/// a sample blends the prototypes of its class and one other and carries
/// both labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub weak_separation: f64,
    pub noise: f64,
    pub multi_label_rate: f64,
    pub query_fraction: f64,
    pub database_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 250,
            dim: 64,
            separation: 0.2,
            weak_separation: 0.035,
            noise: 0.035,
            multi_label_rate: 0.1,
            query_fraction: 0.1,
            database_fraction: 0.7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1".into());
        }
        if self.dim < self.num_classes {
            return bad(format!(
                "feature dim {} cannot hold a {}-class simplex",
                self.dim, self.num_classes
            ));
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return bad(format!("separation must lie in (0, 1], got {}", self.separation));
        }
        if !(0.0..=1.0).contains(&self.weak_separation) {
            return bad(format!("weak_separation must lie in [0, 1], got {}", self.weak_separation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.multi_label_rate) {
            return bad(format!("multi_label_rate must lie in [0, 1), got {}", self.multi_label_rate));
        }
        split_tags(0, self.query_fraction, self.database_fraction, 0).map(|_| ())
    }

    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|class| {
                (0..self.dim)
                    .map(|j| {
                        if j < c {
                            0.5 + self.separation * if j == class { 0.5 } else { -0.5 }
                        } else {
                            let s = if rng.random::<bool>() { 0.5 } else { -0.5 };
                            0.5 + self.weak_separation * s
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<DatasetFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = spec.prototypes(&mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let c = spec.num_classes;
    let mut features = Vec::with_capacity(c * spec.samples_per_class);
    let mut labels = Vec::with_capacity(c * spec.samples_per_class);
    for class in 0..c {
        for _ in 0..spec.samples_per_class {
            let (proto, label) = if rng.random::<f64>() < spec.multi_label_rate {
                let other = (class + rng.random_range(1..c)) % c;
                let blend: Vec<f64> = protos[class]
                    .iter()
                    .zip(&protos[other])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                (blend, LabelVector::from_classes(c, &[class, other]))
            } else {
                (protos[class].clone(), LabelVector::from_classes(c, &[class]))
            };
            let x = proto
                .iter()
                .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            features.push(x);
            labels.push(label);
        }
    }
    let splits = split_tags(features.len(), spec.query_fraction, spec.database_fraction, rng.random())?;
    DatasetFile::new(features, labels, splits)
}
