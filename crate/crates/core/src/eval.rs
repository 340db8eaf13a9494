//! Fidelity metrics, control sweeps and method comparison.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::degrade::{DegradationSpec, DegradeError};
use crate::image::{Image, ImageError};
use crate::model::{dni_interpolate, CfsModel, Coupling, ModelError};

/// Inputs larger than this on either side are restored tile by tile.
pub const INFERENCE_TILE: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid alpha grid: {0}")]
    Grid(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Peak signal-to-noise ratio in dB. Identical images give `Infinite`,
/// serialized as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_rmse(rmse: f64) -> Psnr {
        if rmse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(20.0 * (255.0 / rmse).log10())
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Psnr::Infinite
    }

    fn from_value(v: f64) -> Psnr {
        if v == f64::INFINITY {
            Psnr::Infinite
        } else {
            Psnr::Finite(v)
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub psnr: Psnr,
    pub rmse: f64,
}

/// PSNR and RMSE of two images on the 0..255 scale.
pub fn fidelity(pred: &Image, target: &Image) -> Result<Fidelity> {
    if (pred.channels(), pred.height(), pred.width()) != (target.channels(), target.height(), target.width()) {
        return Err(EvalError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            target.channels(),
            target.height(),
            target.width()
        )));
    }
    let n = pred.data().len() as f64;
    let sse: f64 = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let rmse = (sse / n).sqrt();
    Ok(Fidelity { psnr: Psnr::from_rmse(rmse), rmse })
}

/// Ordered list of control values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid(pub Vec<f64>);

impl AlphaGrid {
    /// Parses `start:stop:step` (inclusive of `stop` within 1e-9) or a
    /// comma-separated list.
    pub fn parse(text: &str) -> Result<AlphaGrid> {
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| EvalError::Grid(format!("bad number {s:?}")));
        let parts: Vec<&str> = text.split(':').collect();
        let values = match parts.as_slice() {
            [start, stop, step] => {
                let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
                if !(step > 0.0 && start.is_finite() && stop.is_finite() && step.is_finite()) || stop < start {
                    return Err(EvalError::Grid(format!("need start <= stop and step > 0 in {text:?}")));
                }
                let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
                if count > 10_000 {
                    return Err(EvalError::Grid(format!("{count} points is too many")));
                }
                (0..count).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
            }
            [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
            _ => return Err(EvalError::Grid(format!("expected start:stop:step, got {text:?}"))),
        };
        AlphaGrid::new(values)
    }

    pub fn new(values: Vec<f64>) -> Result<AlphaGrid> {
        if values.is_empty() {
            return Err(EvalError::Grid("empty grid".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(EvalError::Grid(format!("non-finite alpha {v}")));
        }
        Ok(AlphaGrid(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Something that restores a degraded image under a control value.
pub trait Restorer {
    fn method(&self) -> String;
    fn model_id(&self) -> String;
    fn restore(&self, input: &Image, alpha: f64) -> Result<Image>;
}

fn run_model(model: &CfsModel, input: &Image, coupling: &Coupling) -> Result<Image> {
    let out = model.forward_tiled(&input.to_tensor(), coupling, INFERENCE_TILE)?;
    Ok(Image::from_tensor(&out, 0)?)
}

/// Coefficients from the control mapper.
pub struct Adaptive<'a>(pub &'a CfsModel);
/// Every coefficient set to the control value.
pub struct SharedAlpha<'a>(pub &'a CfsModel);
/// Main branch only; the control value is ignored.
pub struct MainOnly<'a>(pub &'a CfsModel);

impl Restorer for Adaptive<'_> {
    fn method(&self) -> String {
        "cfsnet".into()
    }
    fn model_id(&self) -> String {
        self.0.model_id()
    }
    fn restore(&self, input: &Image, alpha: f64) -> Result<Image> {
        run_model(self.0, input, &Coupling::Adaptive(alpha))
    }
}

impl Restorer for SharedAlpha<'_> {
    fn method(&self) -> String {
        "cfsnet-sa".into()
    }
    fn model_id(&self) -> String {
        self.0.model_id()
    }
    fn restore(&self, input: &Image, alpha: f64) -> Result<Image> {
        run_model(self.0, input, &Coupling::Shared(alpha))
    }
}

impl Restorer for MainOnly<'_> {
    fn method(&self) -> String {
        "main-only".into()
    }
    fn model_id(&self) -> String {
        self.0.model_id()
    }
    fn restore(&self, input: &Image, _alpha: f64) -> Result<Image> {
        run_model(self.0, input, &Coupling::MainOnly)
    }
}

/// Parameter-space interpolation between two networks, each run main-only.
pub struct Dni<'a> {
    pub a: &'a CfsModel,
    pub b: &'a CfsModel,
}

impl<'a> Dni<'a> {
    pub fn new(a: &'a CfsModel, b: &'a CfsModel) -> Result<Self> {
        if a.config() != b.config() {
            return Err(ModelError::ArchitectureMismatch("DNI networks differ in configuration".into()).into());
        }
        Ok(Self { a, b })
    }
}

impl Restorer for Dni<'_> {
    fn method(&self) -> String {
        "dni".into()
    }
    fn model_id(&self) -> String {
        format!("{}+{}", self.a.model_id(), self.b.model_id())
    }
    fn restore(&self, input: &Image, alpha: f64) -> Result<Image> {
        let net = dni_interpolate(self.a, self.b, alpha)?;
        run_model(&net, input, &Coupling::MainOnly)
    }
}

/// Mean fidelity per control value over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: String,
    pub model_id: String,
    pub spec: DegradationSpec,
    pub grid: Vec<f64>,
    pub mean_psnr: Vec<Psnr>,
    pub mean_rmse: Vec<f64>,
    /// `per_image_psnr[i][k]` for image `i` at `grid[k]`.
    pub per_image_psnr: Vec<Vec<Psnr>>,
    pub per_image_rmse: Vec<Vec<f64>>,
    pub best_alpha: f64,
    pub best_psnr: Psnr,
}

impl SweepReport {
    /// `alpha,mean_psnr,mean_rmse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,mean_psnr,mean_rmse\n");
        for ((a, p), r) in self.grid.iter().zip(&self.mean_psnr).zip(&self.mean_rmse) {
            out.push_str(&format!("{a},{p},{r}\n"));
        }
        out
    }

    /// `image,alpha,psnr,rmse`, one row per image and control value.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("image,alpha,psnr,rmse\n");
        for (i, (ps, rs)) in self.per_image_psnr.iter().zip(&self.per_image_rmse).enumerate() {
            for ((a, p), r) in self.grid.iter().zip(ps).zip(rs) {
                out.push_str(&format!("{i},{a},{p},{r}\n"));
            }
        }
        out
    }

    /// Mean PSNR at `alpha`, if it is on the grid.
    pub fn psnr_at(&self, alpha: f64) -> Option<Psnr> {
        self.grid.iter().position(|&a| a == alpha).map(|k| self.mean_psnr[k])
    }
}

/// Degrades each clean image with `spec` (image `i` uses noise stream `i`),
/// restores it at every grid value and scores it against the original.
/// Restored images are clipped to 0..255 before scoring.
pub fn sweep_alpha(
    restorer: &dyn Restorer,
    dataset: &[Image],
    spec: &DegradationSpec,
    grid: &AlphaGrid,
) -> Result<SweepReport> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let inputs = dataset.iter().enumerate().map(|(i, img)| spec.apply(img, i as u64)).collect::<Result<Vec<_>, _>>()?;
    let mut per_image_psnr = Vec::with_capacity(dataset.len());
    let mut per_image_rmse = Vec::with_capacity(dataset.len());
    for (clean, input) in dataset.iter().zip(&inputs) {
        let mut ps = Vec::with_capacity(grid.0.len());
        let mut rs = Vec::with_capacity(grid.0.len());
        for &alpha in grid.values() {
            let restored = restorer.restore(input, alpha)?.clipped();
            let f = fidelity(&restored, clean)?;
            ps.push(f.psnr);
            rs.push(f.rmse);
        }
        per_image_psnr.push(ps);
        per_image_rmse.push(rs);
    }
    let n = dataset.len() as f64;
    let mean_psnr: Vec<Psnr> = (0..grid.0.len())
        .map(|k| Psnr::from_value(per_image_psnr.iter().map(|p| p[k].value()).sum::<f64>() / n))
        .collect();
    let mean_rmse: Vec<f64> = (0..grid.0.len()).map(|k| per_image_rmse.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let best = best_index(&mean_psnr);
    Ok(SweepReport {
        method: restorer.method(),
        model_id: restorer.model_id(),
        spec: spec.clone(),
        grid: grid.0.clone(),
        best_alpha: grid.0[best],
        best_psnr: mean_psnr[best],
        mean_psnr,
        mean_rmse,
        per_image_psnr,
        per_image_rmse,
    })
}

/// First index attaining the maximum.
fn best_index(values: &[Psnr]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if v.value() > values[best].value() {
            best = k;
        }
    }
    best
}

/// True when no grid point lies more than `tol` below the best values on
/// both sides of it, i.e. the curve rises then falls up to ties.
pub fn is_grid_unimodal(values: &[f64], tol: f64) -> bool {
    let n = values.len();
    let mut left_max = vec![f64::NEG_INFINITY; n];
    let mut right_max = vec![f64::NEG_INFINITY; n];
    for i in 1..n {
        left_max[i] = left_max[i - 1].max(values[i - 1]);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        right_max[i] = right_max[i + 1].max(values[i + 1]);
    }
    (0..n).all(|i| values[i] >= left_max[i].min(right_max[i]) - tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub alpha: f64,
    pub mean_psnr: Psnr,
    pub mean_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Sorted by method name, then control value.
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<SweepReport>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,alpha,mean_psnr,mean_rmse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.method, r.alpha, r.mean_psnr, r.mean_rmse));
        }
        out
    }

    pub fn report(&self, method: &str) -> Option<&SweepReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Sweeps the adaptive model, its shared-coefficient view and, when given,
/// a DNI pair over one grid.
pub fn compare_methods(
    cfs: &CfsModel,
    sa: &CfsModel,
    dni: Option<(&CfsModel, &CfsModel)>,
    dataset: &[Image],
    spec: &DegradationSpec,
    grid: &AlphaGrid,
) -> Result<Comparison> {
    let mut reports =
        vec![sweep_alpha(&Adaptive(cfs), dataset, spec, grid)?, sweep_alpha(&SharedAlpha(sa), dataset, spec, grid)?];
    if let Some((a, b)) = dni {
        reports.push(sweep_alpha(&Dni::new(a, b)?, dataset, spec, grid)?);
    }
    reports.sort_by(|a, b| a.method.cmp(&b.method));
    let mut rows = Vec::new();
    for r in &reports {
        let mut idx: Vec<usize> = (0..r.grid.len()).collect();
        idx.sort_by(|&i, &j| r.grid[i].total_cmp(&r.grid[j]));
        for k in idx {
            rows.push(ComparisonRow {
                method: r.method.clone(),
                alpha: r.grid[k],
                mean_psnr: r.mean_psnr[k],
                mean_rmse: r.mean_rmse[k],
            });
        }
    }
    Ok(Comparison { rows, reports })
}
