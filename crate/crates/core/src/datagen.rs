//! Synthetic partial-label datasets and label-noise corruption.
//!
//! # File format
//!
//! Datasets are JSON lines. The first line is a header, every following
//! line one sample:
//!
//! ```text
//! {"d":2,"m":3,"n":2,"provenance":{"generator":"manual","params":null,"seed":0},"negatives":[[2]]}
//! {"x":[0.5,-1.25],"y":[0,1],"y_true":0}
//! {"x":[1.0,0.0],"y":[2],"y_true":null}
//! ```
//!
//! `y` lists allowed output indices. `negatives` are dataset-level forbidden
//! label sets and may be omitted. Floats round-trip bit-exactly.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::numkit::{DenseMatrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: LabelVector,
    pub y_true: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

impl Provenance {
    pub fn manual() -> Self {
        Self {
            generator: "manual".into(),
            params: serde_json::Value::Null,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    m: usize,
    samples: Vec<Sample>,
    negatives: Vec<LabelVector>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        d: usize,
        m: usize,
        samples: Vec<Sample>,
        negatives: Vec<LabelVector>,
        provenance: Provenance,
    ) -> Result<Self> {
        if d == 0 || m < 2 {
            return Err(Error::invalid("datasets need d >= 1 and m >= 2"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != d || s.y.m() != m {
                return Err(Error::invalid(format!("sample {i} does not match d = {d}, m = {m}")));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("input of sample {i}")));
            }
            if let Some(t) = s.y_true {
                if t >= m || !s.y.is_allowed(t) {
                    return Err(Error::invalid(format!("sample {i}: true label {t} is not allowed")));
                }
            }
        }
        if negatives.iter().any(|n| n.m() != m) {
            return Err(Error::invalid("negative label set has the wrong length"));
        }
        Ok(Self {
            d,
            m,
            samples,
            negatives,
            provenance,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn negatives(&self) -> &[LabelVector] {
        &self.negatives
    }

    pub fn with_negatives(mut self, negatives: Vec<LabelVector>) -> Result<Self> {
        if negatives.iter().any(|n| n.m() != self.m) {
            return Err(Error::invalid("negative label set has the wrong length"));
        }
        self.negatives = negatives;
        Ok(self)
    }

    /// `I_neg`: outputs appearing in any negative label set.
    pub fn forbidden_outputs(&self) -> Vec<bool> {
        let mut out = vec![false; self.m];
        for n in &self.negatives {
            n.allowed().for_each(|i| out[i] = true);
        }
        out
    }

    fn subset(&self, idx: &[usize], tag: &str) -> Dataset {
        let mut provenance = self.provenance.clone();
        provenance.generator = format!("{}/{tag}", provenance.generator);
        Dataset {
            d: self.d,
            m: self.m,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            negatives: self.negatives.clone(),
            provenance,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            d: self.d,
            m: self.m,
            n: self.n(),
            provenance: self.provenance.clone(),
            negatives: self.negatives.iter().map(LabelVector::indices).collect(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            let rec = SampleRecord {
                x: s.x.clone(),
                y: s.y.indices(),
                y_true: s.y_true,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let first = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        let mut samples = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("sample line {}: {e}", i + 2)))?;
            samples.push(Sample {
                x: rec.x,
                y: LabelVector::from_indices(header.m, &rec.y)?,
                y_true: rec.y_true,
            });
        }
        if samples.len() != header.n {
            return Err(Error::Parse(format!(
                "header declares {} samples, found {}",
                header.n,
                samples.len()
            )));
        }
        let negatives = header
            .negatives
            .iter()
            .map(|ix| LabelVector::from_indices(header.m, ix))
            .collect::<Result<_>>()?;
        Dataset::new(header.d, header.m, samples, negatives, header.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    d: usize,
    m: usize,
    n: usize,
    provenance: Provenance,
    #[serde(default)]
    negatives: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    x: Vec<f64>,
    y: Vec<usize>,
    #[serde(default)]
    y_true: Option<usize>,
}

pub const SMALL_D: usize = 10;
pub const SMALL_M: usize = 100;
pub const SMALL_N: usize = 10;

/// Ten samples sharing the all-ones input. Sample `i` allows output 0 and
/// every output in `1..=10` except `i + 1`, so output 0 is the only label
/// consistent with all of them.
pub fn gen_small_consistent() -> Dataset {
    let x = vec![1.0; SMALL_D];
    let samples = (1..=SMALL_N)
        .map(|skip| {
            let mut idx = vec![0];
            idx.extend((1..=SMALL_N).filter(|&j| j != skip));
            Sample {
                x: x.clone(),
                y: LabelVector::from_indices(SMALL_M, &idx).expect("indices in range"),
                y_true: Some(0),
            }
        })
        .collect();
    Dataset {
        d: SMALL_D,
        m: SMALL_M,
        samples,
        negatives: Vec::new(),
        provenance: Provenance {
            generator: "small_consistent".into(),
            params: serde_json::json!({ "d": SMALL_D, "m": SMALL_M, "n": SMALL_N }),
            seed: 0,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorPoolSpec {
    pub r_dpool: f64,
    pub r_docc: f64,
}

impl DistractorPoolSpec {
    /// `round(m · r_dpool)` with ties to even; includes the true label.
    pub fn pool_size(&self, m: usize) -> usize {
        (m as f64 * self.r_dpool).round_ties_even() as usize
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(self.r_dpool > 0.0 && self.r_dpool <= 1.0) {
            return Err(Error::invalid(format!("r_dpool must be in (0, 1], got {}", self.r_dpool)));
        }
        if !(0.0..=1.0).contains(&self.r_docc) {
            return Err(Error::invalid(format!("r_docc must be in [0, 1], got {}", self.r_docc)));
        }
        if self.pool_size(m) == 0 {
            return Err(Error::invalid("distractor pools would be empty"));
        }
        Ok(())
    }

    /// Per-class pools `D(c)`, each containing `c` and drawn uniformly.
    pub fn draw_pools(&self, m: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        self.validate(m)?;
        let s = self.pool_size(m);
        Ok((0..m)
            .map(|c| {
                let mut pool = vec![c];
                pool.extend(rng.sample_indices(m - 1, s - 1).into_iter().map(|i| if i >= c { i + 1 } else { i }));
                pool
            })
            .collect())
    }
}

fn hypercube_corners(d: usize, m: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let corner = |bits: u64| (0..d).map(|b| ((bits >> b) & 1) as f64).collect::<Vec<_>>();
    if d <= 20 {
        return rng.sample_indices(1 << d, m).into_iter().map(|i| corner(i as u64)).collect();
    }
    let mut seen = HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let v: Vec<f64> = (0..d).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let key: Vec<bool> = v.iter().map(|&b| b == 1.0).collect();
        if seen.insert(key) {
            out.push(v);
        }
    }
    out
}

/// Gaussian mixture on `m` distinct hypercube corners with distractors
/// drawn from per-class pools.
pub fn gen_large_consistent(
    n: usize,
    d: usize,
    m: usize,
    spec: &DistractorPoolSpec,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if m < 2 || d == 0 {
        return Err(Error::invalid("need m >= 2 and d >= 1"));
    }
    if d < 64 && (m as u128) > (1u128 << d) {
        return Err(Error::invalid(format!("m = {m} exceeds the 2^{d} hypercube corners")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma must be finite and >= 0"));
    }
    spec.validate(m)?;
    let seed = rng.seed();
    let centroids = hypercube_corners(d, m, rng);
    let pools = spec.draw_pools(m, rng)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.index(m);
        let x = centroids[c].iter().map(|&mu| mu + sigma * rng.normal()).collect();
        let mut bits = vec![false; m];
        bits[c] = true;
        for &j in &pools[c][1..] {
            if rng.bernoulli(spec.r_docc) {
                bits[j] = true;
            }
        }
        samples.push(Sample {
            x,
            y: LabelVector::from_bits(bits)?,
            y_true: Some(c),
        });
    }
    Ok(Dataset {
        d,
        m,
        samples,
        negatives: Vec::new(),
        provenance: Provenance {
            generator: "large_consistent".into(),
            params: serde_json::json!({
                "n": n, "d": d, "m": m, "sigma": sigma,
                "r_dpool": spec.r_dpool, "r_docc": spec.r_docc,
            }),
            seed,
        },
    })
}

/// `M[i][j]`: probability that label `j` joins the label set of a sample
/// whose true label is `i`. The diagonal is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMatrix(DenseMatrix);

impl NoiseMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if m.rows() != m.cols() || m.rows() < 2 {
            return Err(Error::invalid("noise matrix must be square with m >= 2"));
        }
        for i in 0..m.rows() {
            if m.get(i, i) != 1.0 {
                return Err(Error::invalid(format!("noise matrix diagonal entry {i} is not 1")));
            }
            if m.row(i).iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("noise matrix row {i} has entries outside [0, 1]")));
            }
        }
        Ok(Self(m))
    }

    /// Header-less CSV, one row per line; lines starting with `#` are skipped.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("noise matrix entry {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(DenseMatrix::from_rows(&rows)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for i in 0..self.m() {
            w.write_record(self.0.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    /// Row sums minus the diagonal.
    pub fn expected_distractors(&self) -> Vec<f64> {
        (0..self.m()).map(|i| self.0.row(i).iter().sum::<f64>() - 1.0).collect()
    }
}

/// First-row offsets `+1 ..= +9` of the five built-in 10×10 circulant
/// noise models.
const CASE_OFFSETS: [[f64; 9]; 5] = [
    [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.3],
    [0.5, 0.3, 0.1, 0.0, 0.0, 0.0, 0.1, 0.3, 0.5],
    [0.2, 0.8, 0.8, 0.8, 0.4, 0.4, 0.2, 0.2, 0.2],
    [0.9, 0.8, 0.8, 0.8, 0.7, 0.7, 0.6, 0.9, 0.9],
];

pub fn builtin_case_matrix(case: usize) -> Result<NoiseMatrix> {
    if !(1..=5).contains(&case) {
        return Err(Error::invalid(format!("noise case must be 1..=5, got {case}")));
    }
    let off = &CASE_OFFSETS[case - 1];
    let mut m = DenseMatrix::identity(10);
    for i in 0..10 {
        for (k, &v) in off.iter().enumerate() {
            m.set(i, (i + k + 1) % 10, v);
        }
    }
    NoiseMatrix::new(m)
}

/// Redraw every label set from its true label: bit `j` is set with
/// probability `M[y_true][j]`.
pub fn apply_noise(dataset: &Dataset, noise: &NoiseMatrix, rng: &mut Rng) -> Result<Dataset> {
    if noise.m() != dataset.m() {
        return Err(Error::DimensionMismatch {
            expected: dataset.m(),
            got: noise.m(),
        });
    }
    let mut samples = Vec::with_capacity(dataset.n());
    for (i, s) in dataset.samples().iter().enumerate() {
        let t = s
            .y_true
            .ok_or_else(|| Error::invalid(format!("sample {i} has no true label")))?;
        let bits = (0..noise.m()).map(|j| rng.bernoulli(noise.get(t, j))).collect();
        samples.push(Sample {
            x: s.x.clone(),
            y: LabelVector::from_bits(bits)?,
            y_true: Some(t),
        });
    }
    let mut provenance = dataset.provenance.clone();
    provenance.generator = format!("{}+noise", provenance.generator);
    Ok(Dataset {
        d: dataset.d(),
        m: dataset.m(),
        samples,
        negatives: dataset.negatives.clone(),
        provenance,
    })
}

/// Seeded shuffle, then `train = round(f0·n)`, `val = round(f1·n)` and the
/// rest to test.
pub fn split(dataset: &Dataset, fractions: [f64; 3], rng: &mut Rng) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = dataset.n();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok((
        dataset.subset(&idx[..n_train], "train"),
        dataset.subset(&idx[n_train..n_train + n_val], "val"),
        dataset.subset(&idx[n_train + n_val..], "test"),
    ))
}
