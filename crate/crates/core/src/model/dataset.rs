use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dims, ModelError};
use crate::ad::Tensor;

/// Version tag written into dataset metadata.
pub const DATASET_FORMAT: u32 = 1;

/// Sidecar metadata stored next to a dataset CSV as `<file>.meta.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: u32,
    pub dims: Dims,
    /// Sampling period in seconds.
    pub period: f64,
    pub units: Units,
    /// `"exact"` when derivative columns come from the generating model,
    /// `"central-difference"` when computed on ingestion.
    pub derivatives: String,
    /// Allowed deviation between stored derivatives and central
    /// differences, relative to the channel's largest rate magnitude.
    pub derivative_tolerance: f64,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub t: String,
    pub v: Vec<String>,
    pub d: Vec<String>,
    pub y: Vec<String>,
    pub z: Vec<String>,
}

impl Units {
    pub fn dimensionless(dims: Dims) -> Self {
        let one = |k: usize| vec!["1".to_string(); k];
        Self { t: "s".into(), v: one(dims.m), d: one(dims.l), y: one(dims.n), z: one(dims.p) }
    }
}

impl DatasetMeta {
    pub fn new(dims: Dims, period: f64) -> Self {
        Self {
            format: DATASET_FORMAT,
            dims,
            period,
            units: Units::dimensionless(dims),
            derivatives: "exact".into(),
            derivative_tolerance: 0.05,
            source: String::new(),
            seed: None,
            config_hash: None,
        }
    }
}

/// Uniformly sampled records `(t, v, d, ḋ, y, ẏ, z)`, stored column-wise
/// with one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub t: Vec<f64>,
    pub v: Tensor,
    pub d: Tensor,
    pub ddot: Tensor,
    pub y: Tensor,
    pub ydot: Tensor,
    pub z: Tensor,
}

/// Central differences along rows, one-sided at both ends.
pub fn finite_difference(x: &Tensor, period: f64) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(rows, cols);
    if rows < 2 {
        return out;
    }
    for r in 0..rows {
        let (a, b, span) = if r == 0 {
            (0, 1, 1.0)
        } else if r == rows - 1 {
            (rows - 2, rows - 1, 1.0)
        } else {
            (r - 1, r + 1, 2.0)
        };
        for c in 0..cols {
            out.set(r, c, (x.get(b, c) - x.get(a, c)) / (span * period));
        }
    }
    out
}

impl TrajectoryDataset {
    pub fn dims(&self) -> Dims {
        self.meta.dims
    }

    pub fn period(&self) -> f64 {
        self.meta.period
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Builds a dataset whose derivative columns are computed by central
    /// differences.
    pub fn from_signals(
        mut meta: DatasetMeta,
        t: Vec<f64>,
        v: Tensor,
        d: Tensor,
        y: Tensor,
        z: Tensor,
    ) -> Result<Self, ModelError> {
        let ddot = finite_difference(&d, meta.period);
        let ydot = finite_difference(&y, meta.period);
        meta.derivatives = "central-difference".into();
        let ds = Self { meta, t, v, d, ddot, y, ydot, z };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks shapes, finiteness, a strictly increasing uniform time grid,
    /// and derivative consistency with central differences.
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |s: String| Err(ModelError::Dataset(s));
        let Dims { n, m, l, p } = self.meta.dims;
        let rows = self.t.len();
        for (name, t, cols) in [
            ("v", &self.v, m),
            ("d", &self.d, l),
            ("ddot", &self.ddot, l),
            ("y", &self.y, n),
            ("ydot", &self.ydot, n),
            ("z", &self.z, p),
        ] {
            if t.shape() != [rows, cols] {
                return err(format!("{name} has shape {:?}, expected [{rows}, {cols}]", t.shape()));
            }
            if !t.is_finite() {
                return err(format!("{name} contains non-finite values"));
            }
        }
        let period = self.meta.period;
        if !(period > 0.0 && period.is_finite()) {
            return err(format!("sampling period {period} is not positive"));
        }
        if self.t.iter().any(|v| !v.is_finite()) {
            return err("t contains non-finite values".into());
        }
        for k in 1..rows {
            let dt = self.t[k] - self.t[k - 1];
            if dt <= 0.0 {
                return err(format!("t is not strictly increasing at row {k}"));
            }
            if (dt - period).abs() > 1e-6 * period {
                return err(format!("non-uniform time step {dt} at row {k} (period {period})"));
            }
        }
        if rows >= 3 {
            let tol = self.meta.derivative_tolerance;
            for (name, x, xdot) in [("y", &self.y, &self.ydot), ("d", &self.d, &self.ddot)] {
                let fd = finite_difference(x, period);
                for c in 0..x.cols() {
                    let scale = (0..rows).fold(1e-12f64, |a, r| a.max(xdot.get(r, c).abs()));
                    // Interior points only: one-sided end differences are first order.
                    let worst = (1..rows - 1).fold(0.0f64, |a, r| a.max((fd.get(r, c) - xdot.get(r, c)).abs()));
                    if worst > tol * scale.max(1e-9) && worst > 1e-9 {
                        return err(format!(
                            "{name}dot{} deviates from finite differences by {worst:e} (tolerance {tol} x {scale:e})",
                            c + 1
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn slice_tensor(t: &Tensor, range: &Range<usize>) -> Tensor {
        let cols = t.cols();
        Tensor::new(range.len(), cols, t.data()[range.start * cols..range.end * cols].to_vec())
    }

    /// Contiguous sub-range of records.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            meta: self.meta.clone(),
            t: self.t[range.clone()].to_vec(),
            v: Self::slice_tensor(&self.v, &range),
            d: Self::slice_tensor(&self.d, &range),
            ddot: Self::slice_tensor(&self.ddot, &range),
            y: Self::slice_tensor(&self.y, &range),
            ydot: Self::slice_tensor(&self.ydot, &range),
            z: Self::slice_tensor(&self.z, &range),
        }
    }

    /// Rows `idx` gathered into tensors `(v, d, ddot, y, ydot, z)`.
    pub fn gather(&self, idx: &[usize]) -> [Tensor; 6] {
        let pick = |t: &Tensor| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(idx.len(), cols, data)
        };
        [pick(&self.v), pick(&self.d), pick(&self.ddot), pick(&self.y), pick(&self.ydot), pick(&self.z)]
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.toml");
        PathBuf::from(s)
    }

    fn header(dims: Dims) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        let push = |h: &mut Vec<String>, prefix: &str, k: usize| {
            for i in 1..=k {
                h.push(format!("{prefix}{i}"));
            }
        };
        push(&mut h, "v", dims.m);
        push(&mut h, "d", dims.l);
        push(&mut h, "y", dims.n);
        push(&mut h, "z", dims.p);
        push(&mut h, "ydot", dims.n);
        push(&mut h, "ddot", dims.l);
        h
    }

    /// Writes the CSV and its metadata sidecar.
    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.meta.dims))?;
        let mut rec: Vec<String> = Vec::new();
        for r in 0..self.len() {
            rec.clear();
            rec.push(self.t[r].to_string());
            for t in [&self.v, &self.d, &self.y, &self.z, &self.ydot, &self.ddot] {
                rec.extend(t.row_slice(r).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta = toml::to_string(&self.meta).map_err(|e| ModelError::Format(e.to_string()))?;
        fs::write(Self::meta_path(path), meta)?;
        Ok(())
    }

    /// Reads a dataset CSV. The metadata sidecar supplies units and the
    /// derivative tolerance; without it dimensions are inferred from the
    /// header and the period from the first time step. Missing derivative
    /// columns are filled by central differences.
    pub fn read(path: &Path) -> Result<Self, ModelError> {
        let meta_path = Self::meta_path(path);
        let meta: Option<DatasetMeta> = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path)?;
            Some(toml::from_str(&text).map_err(|e| ModelError::Dataset(format!("{}: {e}", meta_path.display())))?)
        } else {
            None
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let count = |prefix: &str| (1..).take_while(|i| header.iter().any(|h| *h == format!("{prefix}{i}"))).count();
        let dims = Dims { n: count("y"), m: count("v"), l: count("d"), p: count("z") };
        if let Some(meta) = &meta {
            if meta.dims != dims {
                return Err(ModelError::Dataset(format!(
                    "header dimensions {dims:?} disagree with metadata {:?}",
                    meta.dims
                )));
            }
        }
        let col = |name: String| header.iter().position(|h| *h == name);
        let t_col = col("t".into()).ok_or_else(|| ModelError::Dataset("missing column t".into()))?;
        let cols =
            |prefix: &str, k: usize| -> Option<Vec<usize>> { (1..=k).map(|i| col(format!("{prefix}{i}"))).collect() };
        let v_cols = cols("v", dims.m).expect("counted");
        let d_cols = cols("d", dims.l).expect("counted");
        let y_cols = cols("y", dims.n).expect("counted");
        let z_cols = cols("z", dims.p).expect("counted");
        let ydot_cols = if dims.n > 0 { cols("ydot", dims.n) } else { Some(vec![]) };
        let ddot_cols = if dims.l > 0 { cols("ddot", dims.l) } else { Some(vec![]) };

        let mut t = Vec::new();
        let mut bufs: [Vec<f64>; 6] = Default::default();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<f64, ModelError> {
                rec.get(c)
                    .ok_or_else(|| ModelError::Dataset(format!("row {} is short", row + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| ModelError::Dataset(format!("row {}: {e}", row + 1)))
            };
            t.push(get(t_col)?);
            for (buf, cs) in bufs.iter_mut().zip([
                Some(&v_cols),
                Some(&d_cols),
                Some(&y_cols),
                Some(&z_cols),
                ydot_cols.as_ref(),
                ddot_cols.as_ref(),
            ]) {
                if let Some(cs) = cs {
                    for &c in cs {
                        buf.push(get(c)?);
                    }
                }
            }
        }
        let rows = t.len();
        let [v, d, y, z, ydot, ddot] = bufs;
        let v = Tensor::new(rows, dims.m, v);
        let d = Tensor::new(rows, dims.l, d);
        let y = Tensor::new(rows, dims.n, y);
        let z = Tensor::new(rows, dims.p, z);
        let mut meta = match meta {
            Some(m) => m,
            None => {
                let period = if rows >= 2 { t[1] - t[0] } else { 1.0 };
                let mut m = DatasetMeta::new(dims, period);
                m.source = path.display().to_string();
                m
            }
        };
        let ydot = match ydot_cols {
            Some(_) => Tensor::new(rows, dims.n, ydot),
            None => {
                meta.derivatives = "central-difference".into();
                finite_difference(&y, meta.period)
            }
        };
        let ddot = match ddot_cols {
            Some(_) => Tensor::new(rows, dims.l, ddot),
            None => {
                meta.derivatives = "central-difference".into();
                finite_difference(&d, meta.period)
            }
        };
        let ds = Self { meta, t, v, d, ddot, y, ydot, z };
        ds.validate()?;
        Ok(ds)
    }
}
