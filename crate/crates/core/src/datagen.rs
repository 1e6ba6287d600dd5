//! Seeded synthetic data generators.
//!
//! Two processes are provided. The NPIV process draws a correlated latent
//! Gaussian pair, decodes both sides through fixed random MLPs, and produces
//! an endogenous outcome from the absolute-value target plus the shared
//! confounder. The proxy-control process draws a latent confounder with two
//! noisy proxies, decodes the proxies to high dimension, and exposes the
//! conditional-moment reduction z = (t, v), x = (t, w).
//!
//! Generation order is fixed and all randomness flows from one seeded
//! stream, so a `(generator, seed)` pair is a complete description of the
//! dataset: equal seeds give bit-identical tables.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Named row ranges of a dataset, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub covariance: usize,
    pub estimation: usize,
    pub validation: usize,
    pub test: usize,
}

/// Which split of a [`Dataset`] to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Covariance,
    Estimation,
    Validation,
    Test,
}

pub const ALL_SPLITS: [Split; 5] = [
    Split::Train,
    Split::Covariance,
    Split::Estimation,
    Split::Validation,
    Split::Test,
];

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Covariance => "covariance",
            Split::Estimation => "estimation",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.covariance + self.estimation + self.validation + self.test
    }

    /// Default carve-up of `n` rows: 40% train, 30% estimation,
    /// 10% validation, 20% test, no separate covariance split (the trainer
    /// reuses the train split for covariance estimation by default).
    pub fn default_for(n: usize) -> Self {
        let train = (n as f64 * 0.4).floor() as usize;
        let estimation = (n as f64 * 0.3).floor() as usize;
        let validation = (n as f64 * 0.1).floor() as usize;
        let test = n - train - estimation - validation;
        SplitCounts {
            train,
            covariance: 0,
            estimation,
            validation,
            test,
        }
    }

    fn range(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b, c, d) = (
            self.train,
            self.covariance,
            self.estimation,
            self.validation,
        );
        match split {
            Split::Train => 0..a,
            Split::Covariance => a..a + b,
            Split::Estimation => a + b..a + b + c,
            Split::Validation => a + b + c..a + b + c + d,
            Split::Test => a + b + c + d..self.total(),
        }
    }
}

/// A fixed random two-hidden-layer tanh MLP used as a decoder.
///
/// Deterministic given its seed: weights are Gaussian with scale
/// `1/sqrt(fan_in)`, biases zero, hidden width twice the output width,
/// linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl DecoderSpec {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        DecoderSpec {
            input_dim,
            output_dim,
            hidden: 2 * output_dim,
            seed,
        }
    }

    fn weights(&self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = stream(self.seed, 0xdec0de);
        let mut draw = |fan_in: usize, fan_out: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| {
                let g: f64 = rng.sample(StandardNormal);
                scale * g
            })
        };
        let w1 = draw(self.input_dim, self.hidden);
        let w2 = draw(self.hidden, self.hidden);
        let w3 = draw(self.hidden, self.output_dim);
        (w1, w2, w3)
    }

    /// Apply the decoder to a batch of latent rows.
    pub fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let (w1, w2, w3) = self.weights();
        let mut h = input.dot(&w1);
        h.mapv_inplace(f64::tanh);
        let mut h2 = h.dot(&w2);
        h2.mapv_inplace(f64::tanh);
        h2.dot(&w3)
    }
}

/// Latent variables retained for oracle-aware evaluation.
#[derive(Debug, Clone, Default)]
pub struct Latents {
    pub xbar: Option<Array1<f64>>,
    pub zbar: Option<Array1<f64>>,
    pub ubar: Option<Array1<f64>>,
}

/// Ground truth attached to a synthetic dataset, in standardized y units.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Standardized f0(x_i) per row (NPIV; evaluated through the latents).
    RowTarget(Array1<f64>),
    /// Dose-response curve `t -> (lin*t + quad*t^2 - m_y)/s_y`.
    DoseResponse { lin: f64, quad: f64 },
}

/// Generator parameters recorded in dataset metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Npiv { rho: f64, d: usize },
    Proxy { d_ex: usize, coeffs: ProxyCoeffs },
}

/// Coefficients of the latent linear-Gaussian proxy process.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProxyCoeffs {
    /// Loading of the confounder on proxy v.
    pub a_v: f64,
    pub sigma_v: f64,
    /// Loading of the confounder on proxy w.
    pub a_w: f64,
    pub sigma_w: f64,
    /// Confounder -> treatment link strength (inside the tanh link).
    pub c_u: f64,
    pub c_t: f64,
    /// Outcome: y = lin*t + quad*t^2 + y_tu*t*u + y_u*u + sigma_y*noise.
    pub lin: f64,
    pub quad: f64,
    pub y_tu: f64,
    pub y_u: f64,
    pub sigma_y: f64,
}

impl Default for ProxyCoeffs {
    fn default() -> Self {
        ProxyCoeffs {
            a_v: 0.9,
            sigma_v: 0.5,
            a_w: 0.9,
            sigma_w: 0.5,
            c_u: 0.8,
            c_t: 0.6,
            lin: 1.2,
            quad: 1.0,
            y_tu: 0.5,
            y_u: 2.0,
            sigma_y: 0.1,
        }
    }
}

/// Serializable dataset metadata (everything needed to regenerate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub dgp: DgpSpec,
    pub seed: u64,
    pub splits: SplitCounts,
    pub d_z: usize,
    pub d_x: usize,
    pub overlap_dim: usize,
    pub m_y: f64,
    pub s_y: f64,
    pub decoders: Vec<DecoderSpec>,
}

/// Immutable table of (z, x, y) samples with named splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub splits: SplitCounts,
    pub seed: u64,
    pub m_y: f64,
    pub s_y: f64,
    /// Number of leading columns shared between z and x (the treatment for
    /// proxy data; 0 when instrument and treatment do not overlap).
    pub overlap_dim: usize,
    pub latents: Latents,
    pub truth: Option<GroundTruth>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        self.splits.range(split)
    }

    pub fn z_split(&self, split: Split) -> ArrayView2<'_, f64> {
        let r = self.range(split);
        self.z.slice(ndarray::s![r, ..])
    }

    pub fn x_split(&self, split: Split) -> ArrayView2<'_, f64> {
        let r = self.range(split);
        self.x.slice(ndarray::s![r, ..])
    }

    pub fn y_split(&self, split: Split) -> ndarray::ArrayView1<'_, f64> {
        let r = self.range(split);
        self.y.slice(ndarray::s![r])
    }

    /// Columns of x past the overlap block (the component the spectral
    /// model is trained on when overlap handling is active).
    pub fn x_component(&self, split: Split) -> ArrayView2<'_, f64> {
        let r = self.range(split);
        self.x.slice(ndarray::s![r, self.overlap_dim..])
    }

    /// Standardized row target for a split, when the generator knows it.
    pub fn row_target(&self, split: Split) -> Option<Array1<f64>> {
        match &self.truth {
            Some(GroundTruth::RowTarget(t)) => {
                let r = self.range(split);
                Some(t.slice(ndarray::s![r]).to_owned())
            }
            _ => None,
        }
    }

    /// Standardized dose-response truth at treatment value `t`.
    pub fn dose_response_truth(&self, t: f64) -> Option<f64> {
        match &self.truth {
            Some(GroundTruth::DoseResponse { lin, quad }) => {
                Some((lin * t + quad * t * t - self.m_y) / self.s_y)
            }
            _ => None,
        }
    }
}

fn standardize_on_train(
    y_raw: &Array1<f64>,
    splits: &SplitCounts,
) -> Result<(Array1<f64>, f64, f64)> {
    let r = splits.range(Split::Train);
    if r.is_empty() {
        return Err(Error::InvalidInput(
            "train split is empty; cannot standardize".into(),
        ));
    }
    let train = y_raw.slice(ndarray::s![r]);
    let m = train.mean().unwrap();
    let s = (train.mapv(|v| (v - m) * (v - m)).mean().unwrap()).sqrt();
    if s <= 0.0 {
        return Err(Error::DegenerateInput(
            "train outcomes are constant; cannot standardize".into(),
        ));
    }
    Ok(((y_raw - m) / s, m, s))
}

/// Generate the decoded NPIV dataset with default split fractions.
pub fn gen_npiv(rho: f64, d: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_npiv_with_splits(rho, d, SplitCounts::default_for(n), seed)
}

/// Generate the decoded NPIV dataset with explicit split sizes.
///
/// Latent process: `zbar, ubar ~ N(0,1)`, `xbar = rho*zbar +
/// sqrt(1-rho^2)*ubar`, independent `(z_perp, x_perp) ~ N(0, I_{2(d-1)})`,
/// decoded observations `x = dec_x(xbar, x_perp)`, `z = dec_z(zbar,
/// z_perp)` of dimension `2d` each, and outcome `ybar ~ N(|xbar| + 2*ubar,
/// 0.01)` standardized on the train split.
pub fn gen_npiv_with_splits(rho: f64, d: usize, splits: SplitCounts, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!(
            "rho must be in [0, 1), got {rho}"
        )));
    }
    if d < 1 {
        return Err(Error::InvalidInput("d must be >= 1".into()));
    }
    let n = splits.total();
    if n < 1 {
        return Err(Error::InvalidInput("need at least one row".into()));
    }
    let dec_x = DecoderSpec::new(d, 2 * d, crate::rng::derive_seed(seed, 1));
    let dec_z = DecoderSpec::new(d, 2 * d, crate::rng::derive_seed(seed, 2));

    let mut rng = stream(seed, 3);
    let mut zbar = Array1::zeros(n);
    let mut ubar = Array1::zeros(n);
    let mut z_lat = Array2::zeros((n, d));
    let mut x_lat = Array2::zeros((n, d));
    let mut y_raw = Array1::zeros(n);
    let com = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let zb: f64 = rng.sample(StandardNormal);
        let ub: f64 = rng.sample(StandardNormal);
        let xb = rho * zb + com * ub;
        zbar[i] = zb;
        ubar[i] = ub;
        z_lat[[i, 0]] = zb;
        x_lat[[i, 0]] = xb;
        for j in 1..d {
            z_lat[[i, j]] = rng.sample(StandardNormal);
        }
        for j in 1..d {
            x_lat[[i, j]] = rng.sample(StandardNormal);
        }
        let noise: f64 = rng.sample(StandardNormal);
        y_raw[i] = xb.abs() + 2.0 * ub + 0.1 * noise;
    }
    let z = dec_z.apply(z_lat.view());
    let x = dec_x.apply(x_lat.view());
    let (y, m_y, s_y) = standardize_on_train(&y_raw, &splits)?;
    let xbar = x_lat.index_axis(Axis(1), 0).to_owned();
    let f0_rows = xbar.mapv(|v| (v.abs() - m_y) / s_y);

    let meta = DatasetMeta {
        schema_version: 1,
        dgp: DgpSpec::Npiv { rho, d },
        seed,
        splits,
        d_z: 2 * d,
        d_x: 2 * d,
        overlap_dim: 0,
        m_y,
        s_y,
        decoders: vec![dec_x, dec_z],
    };
    Ok(Dataset {
        z,
        x,
        y,
        splits,
        seed,
        m_y,
        s_y,
        overlap_dim: 0,
        latents: Latents {
            xbar: Some(xbar),
            zbar: Some(zbar),
            ubar: Some(ubar),
        },
        truth: Some(GroundTruth::RowTarget(f0_rows)),
        meta,
    })
}

/// Generate the synthetic proxy-control dataset with default splits and
/// default latent coefficients.
pub fn gen_proxy(d_ex: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_proxy_with(
        d_ex,
        SplitCounts::default_for(n),
        seed,
        ProxyCoeffs::default(),
    )
}

/// Generate the synthetic proxy-control dataset.
///
/// Latent process: confounder `u ~ N(0,1)`, proxies `vbar = a_v*u +
/// sigma_v*eps`, `wbar = a_w*u + sigma_w*eps'`, treatment `t = tanh(c_u*u +
/// c_t*eps_t)`, outcome `y = lin*t + quad*t^2 + y_tu*t*u + y_u*u + noise`.
/// Observed proxies are decoder images of `(vbar, v_perp)` and `(wbar,
/// w_perp)` with `v_perp, w_perp ~ N(0, I_{d_ex})` and output dimension
/// `4*(1+d_ex)`. The dataset exposes `z = (t, v)`, `x = (t, w)` with
/// `overlap_dim = 1`; the true dose-response curve is `lin*t + quad*t^2`.
pub fn gen_proxy_with(
    d_ex: usize,
    splits: SplitCounts,
    seed: u64,
    coeffs: ProxyCoeffs,
) -> Result<Dataset> {
    let n = splits.total();
    if n < 1 {
        return Err(Error::InvalidInput("need at least one row".into()));
    }
    let in_dim = 1 + d_ex;
    let out_dim = 4 * in_dim;
    let dec_v = DecoderSpec::new(in_dim, out_dim, crate::rng::derive_seed(seed, 11));
    let dec_w = DecoderSpec::new(in_dim, out_dim, crate::rng::derive_seed(seed, 12));

    let mut rng = stream(seed, 13);
    let mut ubar = Array1::zeros(n);
    let mut t = Array1::zeros(n);
    let mut y_raw = Array1::zeros(n);
    let mut v_lat = Array2::zeros((n, in_dim));
    let mut w_lat = Array2::zeros((n, in_dim));
    for i in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        let ev: f64 = rng.sample(StandardNormal);
        let ew: f64 = rng.sample(StandardNormal);
        let et: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        ubar[i] = u;
        v_lat[[i, 0]] = coeffs.a_v * u + coeffs.sigma_v * ev;
        w_lat[[i, 0]] = coeffs.a_w * u + coeffs.sigma_w * ew;
        let ti = (coeffs.c_u * u + coeffs.c_t * et).tanh();
        t[i] = ti;
        y_raw[i] = coeffs.lin * ti
            + coeffs.quad * ti * ti
            + coeffs.y_tu * ti * u
            + coeffs.y_u * u
            + coeffs.sigma_y * ey;
        for j in 0..d_ex {
            v_lat[[i, 1 + j]] = rng.sample(StandardNormal);
        }
        for j in 0..d_ex {
            w_lat[[i, 1 + j]] = rng.sample(StandardNormal);
        }
    }
    let v = dec_v.apply(v_lat.view());
    let w = dec_w.apply(w_lat.view());
    let (y, m_y, s_y) = standardize_on_train(&y_raw, &splits)?;

    let mut z = Array2::zeros((n, 1 + out_dim));
    let mut x = Array2::zeros((n, 1 + out_dim));
    for i in 0..n {
        z[[i, 0]] = t[i];
        x[[i, 0]] = t[i];
        for j in 0..out_dim {
            z[[i, 1 + j]] = v[[i, j]];
            x[[i, 1 + j]] = w[[i, j]];
        }
    }

    let meta = DatasetMeta {
        schema_version: 1,
        dgp: DgpSpec::Proxy { d_ex, coeffs },
        seed,
        splits,
        d_z: 1 + out_dim,
        d_x: 1 + out_dim,
        overlap_dim: 1,
        m_y,
        s_y,
        decoders: vec![dec_v, dec_w],
    };
    Ok(Dataset {
        z,
        x,
        y,
        splits,
        seed,
        m_y,
        s_y,
        overlap_dim: 1,
        latents: Latents {
            xbar: None,
            zbar: None,
            ubar: Some(ubar),
        },
        truth: Some(GroundTruth::DoseResponse {
            lin: coeffs.lin,
            quad: coeffs.quad,
        }),
        meta,
    })
}

/// Regenerate a dataset from its metadata document.
pub fn regenerate(meta: &DatasetMeta) -> Result<Dataset> {
    match &meta.dgp {
        DgpSpec::Npiv { rho, d } => gen_npiv_with_splits(*rho, *d, meta.splits, meta.seed),
        DgpSpec::Proxy { d_ex, coeffs } => gen_proxy_with(*d_ex, meta.splits, meta.seed, *coeffs),
    }
}

/// Persist a dataset as a directory: `metadata.json` plus one CSV per
/// non-empty split with header `z_0..,x_0..,y`.
pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = dir.join("metadata.json").exists();
        if occupied && !force {
            return Err(Error::Refused(format!(
                "output directory {} already holds a dataset (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    let meta_json = serde_json::to_string_pretty(&ds.meta)?;
    std::fs::write(dir.join("metadata.json"), meta_json)?;
    for split in ALL_SPLITS {
        let r = ds.range(split);
        if r.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}.csv", split.name()));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (dz, dx) = (ds.z.ncols(), ds.x.ncols());
        let mut header = Vec::with_capacity(dz + dx + 1);
        for j in 0..dz {
            header.push(format!("z_{j}"));
        }
        for j in 0..dx {
            header.push(format!("x_{j}"));
        }
        header.push("y".into());
        writeln!(out, "{}", header.join(","))?;
        for i in r {
            let mut fields = Vec::with_capacity(dz + dx + 1);
            for j in 0..dz {
                fields.push(format!("{}", ds.z[[i, j]]));
            }
            for j in 0..dx {
                fields.push(format!("{}", ds.x[[i, j]]));
            }
            fields.push(format!("{}", ds.y[i]));
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

/// Load a dataset directory. The generator is replayed from the stored
/// metadata (recovering latents and ground truth) and verified against the
/// stored CSV tables.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_json = std::fs::read_to_string(dir.join("metadata.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_json)?;
    let ds = regenerate(&meta)?;
    for split in ALL_SPLITS {
        let r = ds.range(split);
        if r.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}.csv", split.name()));
        let text = std::fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let _header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("empty csv at {}", path.display())))?;
        for (row, line) in r.clone().zip(lines) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("bad csv number: {e}")))?;
            let (dz, dx) = (ds.z.ncols(), ds.x.ncols());
            if vals.len() != dz + dx + 1 {
                return Err(Error::InvalidInput(format!(
                    "csv row width {} does not match dims {}",
                    vals.len(),
                    dz + dx + 1
                )));
            }
            let ok = (0..dz).all(|j| vals[j] == ds.z[[row, j]])
                && (0..dx).all(|j| vals[dz + j] == ds.x[[row, j]])
                && vals[dz + dx] == ds.y[row];
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "stored csv does not match regenerated dataset at {} row {row}",
                    split.name()
                )));
            }
        }
    }
    Ok(ds)
}
