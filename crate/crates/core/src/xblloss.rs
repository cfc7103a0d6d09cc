//! Explanation losses and the combined training objective.
//!
//! XBL-D penalizes Grad-CAM mass on the confounder, weighted by how far the
//! attended confounder cells lie from the object centroid. RRR penalizes
//! masked input gradients of the summed log-probabilities; RRR-G penalizes
//! masked Grad-CAM mass. Gradients are analytic (see [`Objective`]).

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoygen::{centroid, BinaryMask, DecoyInstance};
use crate::error::{Error, Result};
use crate::explainer::{cam_pass, one_hot, SaliencyMap};
use crate::modelzoo::ModelHandle;
use crate::nn::{Adjoint, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    /// Classification weight λ1.
    pub lambda1: f64,
    /// Explanation weight λ2.
    pub lambda2: f64,
    /// Weight decay λ on the sum of squared parameters.
    pub lambda: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            lambda1: 2.7,
            lambda2: 0.1,
            lambda: 1e-5,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationMethod {
    XblD,
    Rrr,
    RrrG,
}

impl ExplanationMethod {
    pub const ALL: [ExplanationMethod; 3] = [ExplanationMethod::XblD, ExplanationMethod::Rrr, ExplanationMethod::RrrG];

    pub fn as_str(self) -> &'static str {
        match self {
            ExplanationMethod::XblD => "xbl_d",
            ExplanationMethod::Rrr => "rrr",
            ExplanationMethod::RrrG => "rrr_g",
        }
    }
}

impl fmt::Display for ExplanationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplanationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "xbl_d" | "xbld" => Ok(ExplanationMethod::XblD),
            "rrr" => Ok(ExplanationMethod::Rrr),
            "rrr_g" | "rrrg" => Ok(ExplanationMethod::RrrG),
            _ => Err(Error::InvalidConfig(format!("unknown method `{s}` (expected xbl_d, rrr or rrr_g)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub expl: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<f64>,
}

impl LossBreakdown {
    pub fn compose(ce: f64, expl: f64, reg: f64, coeffs: &LossCoefficients, per_instance: Vec<f64>) -> Self {
        LossBreakdown {
            ce,
            expl,
            reg,
            total: coeffs.lambda1 * ce + coeffs.lambda2 * expl + coeffs.lambda * reg,
            lambda1: coeffs.lambda1,
            lambda2: coeffs.lambda2,
            lambda: coeffs.lambda,
            per_instance,
        }
    }

    /// `total = λ1·ce + λ2·expl + λ·reg` within `1e-6` relative.
    pub fn identity_holds(&self) -> bool {
        let want = self.lambda1 * self.ce + self.lambda2 * self.expl + self.lambda * self.reg;
        (self.total - want).abs() <= 1e-6 * want.abs().max(self.total.abs()).max(1e-12)
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.expl, self.reg, self.total].iter().all(|v| v.is_finite())
    }

    /// Term-wise mean (per-instance terms dropped).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let coeffs = LossCoefficients {
            lambda1: first.lambda1,
            lambda2: first.lambda2,
            lambda: first.lambda,
        };
        Some(LossBreakdown::compose(avg(|b| b.ce), avg(|b| b.expl), avg(|b| b.reg), &coeffs, Vec::new()))
    }
}

/// Downsamples a mask to `grid` by fractional area averaging; a cell is set
/// when at least half of its source area is set.
pub fn align_mask_to_grid(mask: &BinaryMask, grid: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = (mask.height(), mask.width());
    let (hs, ws) = grid;
    if hs == 0 || ws == 0 || hs > h || ws > w {
        return Err(Error::Size(format!("cannot align a {h}x{w} mask to a {hs}x{ws} grid")));
    }
    if (hs, ws) == (h, w) {
        return Ok(mask.clone());
    }
    let rows = overlaps(h, hs);
    let cols = overlaps(w, ws);
    Ok(BinaryMask::from_fn(hs, ws, |i, j| {
        let mut count = 0usize;
        for &(r, wr) in &rows[i] {
            for &(c, wc) in &cols[j] {
                if mask.get(r, c) {
                    count += wr * wc;
                }
            }
        }
        2 * count >= h * w
    }))
}

/// For each of `m` cells over `n` pixels: `(pixel, overlap)` pairs in units of
/// `1/m` pixel.
fn overlaps(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    (0..m)
        .map(|i| {
            let (lo, hi) = (i * n, (i + 1) * n);
            (lo / m..=(hi - 1) / m)
                .filter_map(|p| {
                    let ov = hi.min((p + 1) * m).saturating_sub(lo.max(p * m));
                    (ov > 0).then_some((p, ov))
                })
                .collect()
        })
        .collect()
}

/// Confounder cells the explanation attends to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntersectionSet {
    pub instance: String,
    pub coords: Vec<(usize, usize)>,
    pub activations: Vec<f32>,
}

impl IntersectionSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn intersect(expl: &SaliencyMap, con_grid: &BinaryMask, eps: f64) -> Result<IntersectionSet> {
    check_grid(expl, con_grid)?;
    let mut out = IntersectionSet::default();
    for (r, c) in con_grid.support() {
        let v = expl.get(r, c);
        if f64::from(v) > eps {
            out.coords.push((r, c));
            out.activations.push(v);
        }
    }
    Ok(out)
}

fn check_grid(expl: &SaliencyMap, grid: &BinaryMask) -> Result<()> {
    if (expl.height(), expl.width()) != (grid.height(), grid.width()) {
        return Err(Error::shape(
            format!("{}x{}", expl.height(), expl.width()),
            format!("{}x{}", grid.height(), grid.width()),
        ));
    }
    Ok(())
}

pub fn grid_diagonal(grid: (usize, usize)) -> f64 {
    let (h, w) = (grid.0.saturating_sub(1) as f64, grid.1.saturating_sub(1) as f64);
    (h * h + w * w).sqrt()
}

/// Mean of the nearest and farthest intersection distances to `g`, over the
/// grid diagonal. Zero for an empty intersection.
pub fn distance_score(set: &IntersectionSet, g: (f64, f64), grid_diag: f64) -> f64 {
    if set.is_empty() || grid_diag <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &(r, c) in &set.coords {
        let d = (r as f64 - g.0).hypot(c as f64 - g.1);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    ((lo + hi) / 2.0 / grid_diag).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XblDTerm {
    pub distance: f64,
    pub mass: f64,
    pub term: f64,
}

/// Per-instance XBL-D term `D·S` on a fixed explanation map.
pub fn xbl_d_term(expl: &SaliencyMap, con_grid: &BinaryMask, g: (f64, f64), eps: f64) -> Result<XblDTerm> {
    check_grid(expl, con_grid)?;
    if expl.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInstability("non-finite explanation value".into()));
    }
    let set = intersect(expl, con_grid, eps)?;
    let distance = distance_score(&set, g, grid_diagonal((expl.height(), expl.width())));
    let mass: f64 = con_grid.support().map(|(r, c)| f64::from(expl.get(r, c))).sum();
    Ok(XblDTerm {
        distance,
        mass,
        term: distance * mass,
    })
}

/// Batch XBL-D loss on fixed maps: mean over instances with a centroid.
pub fn xbl_d_from_maps(maps: &[SaliencyMap], con_grids: &[BinaryMask], centroids: &[Option<(f64, f64)>], eps: f64) -> Result<(f64, Vec<f64>)> {
    if maps.len() != con_grids.len() || maps.len() != centroids.len() {
        return Err(Error::shape(format!("{} masks and centroids", maps.len()), con_grids.len().min(centroids.len())));
    }
    let mut terms = Vec::with_capacity(maps.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for ((m, c), g) in maps.iter().zip(con_grids).zip(centroids) {
        match g {
            Some(g) => {
                let t = xbl_d_term(m, c, *g, eps)?.term;
                sum += t;
                n += 1;
                terms.push(t);
            }
            None => terms.push(0.0),
        }
    }
    Ok((if n == 0 { 0.0 } else { sum / n as f64 }, terms))
}

/// Batch RRR-G loss on fixed maps: summed confounder mass.
pub fn rrr_g_from_maps(maps: &[SaliencyMap], con_grids: &[BinaryMask]) -> Result<f64> {
    let mut sum = 0.0;
    for (m, c) in maps.iter().zip(con_grids) {
        check_grid(m, c)?;
        sum += c.support().map(|(r, col)| f64::from(m.get(r, col))).sum::<f64>();
    }
    Ok(sum)
}

/// Grid-resolution object centroids keyed by instance id. An entry is
/// recomputed when the mask behind an id changes.
#[derive(Clone, Debug)]
pub struct CentroidCache {
    grid: (usize, usize),
    entries: HashMap<String, (u64, Option<(f64, f64)>)>,
    computed: usize,
}

impl CentroidCache {
    pub fn new(grid: (usize, usize)) -> Self {
        CentroidCache {
            grid,
            entries: HashMap::new(),
            computed: 0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// `None` when the aligned object mask is empty (instance skipped).
    pub fn get(&mut self, id: &str, obj_mask: &BinaryMask) -> Result<Option<(f64, f64)>> {
        let fp = fingerprint(obj_mask);
        if let Some(&(f, g)) = self.entries.get(id) {
            if f == fp {
                return Ok(g);
            }
        }
        let aligned = align_mask_to_grid(obj_mask, self.grid)?;
        let g = if aligned.is_empty() {
            log::warn!("instance {id}: object mask is empty at grid resolution, skipped for the explanation loss");
            None
        } else {
            Some(centroid(&aligned)?)
        };
        self.entries.insert(id.to_string(), (fp, g));
        self.computed += 1;
        Ok(g)
    }

    /// Number of centroid computations so far (cache misses).
    pub fn computed(&self) -> usize {
        self.computed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids whose aligned object mask was empty.
    pub fn skipped(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().filter(|(_, (_, g))| g.is_none()).map(|(k, _)| k.as_str()).collect();
        ids.sort_unstable();
        ids
    }
}

fn fingerprint(mask: &BinaryMask) -> u64 {
    let mut h = DefaultHasher::new();
    (mask.height(), mask.width()).hash(&mut h);
    mask.values().hash(&mut h);
    h.finish()
}

/// A batch laid out for one network: inputs, labels, avoid masks at input
/// and grid resolution, and object centroids.
#[derive(Clone, Debug)]
pub struct PreparedBatch<F> {
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    /// `B × H × W`, 0/1.
    pub con_input: Vec<F>,
    /// `B × H_s × W_s`; empty when the network has no conv layers.
    pub con_grid: Vec<bool>,
    pub centroids: Vec<Option<(f64, f64)>>,
    pub grid: Option<(usize, usize)>,
}

impl<F: Scalar> PreparedBatch<F> {
    pub fn new(net: &Network<F>, instances: &[&DecoyInstance], cache: Option<&mut CentroidCache>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let shape = net.input_shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let grid = net.feature_layer().map(|fl| {
            let s = net.shape_at(fl);
            (s[1], s[2])
        });
        let mut local;
        let cache = match (cache, grid) {
            (Some(cache), Some(g)) => {
                if cache.grid() != g {
                    return Err(Error::InvalidConfig(format!("centroid cache grid {:?} does not match the network grid {g:?}", cache.grid())));
                }
                Some(cache)
            }
            (None, Some(g)) => {
                local = CentroidCache::new(g);
                Some(&mut local)
            }
            (_, None) => None,
        };
        let mut items = Vec::with_capacity(instances.len());
        let mut con_input = Vec::with_capacity(instances.len() * h * w);
        let mut con_grid = Vec::new();
        let mut centroids = Vec::with_capacity(instances.len());
        for inst in instances {
            let img = &inst.image;
            if (img.channels(), img.height(), img.width()) != (c, h, w) {
                return Err(Error::shape(
                    format!("{h}x{w}x{c}"),
                    format!("{}x{}x{}", img.height(), img.width(), img.channels()),
                ));
            }
            items.push(img.to_chw().into_iter().map(|v| F::of(f64::from(v))).collect());
            con_input.extend(inst.con_mask.values().iter().map(|&v| if v != 0 { F::one() } else { F::zero() }));
            if let Some(g) = grid {
                con_grid.extend(align_mask_to_grid(&inst.con_mask, g)?.values().iter().map(|&v| v != 0));
            }
        }
        match cache {
            Some(cache) => {
                for inst in instances {
                    centroids.push(cache.get(&inst.id, &inst.obj_mask)?);
                }
            }
            None => centroids.resize(instances.len(), None),
        }
        Ok(PreparedBatch {
            x: Tensor::stack(&[c, h, w], items),
            labels: instances.iter().map(|i| i.image.label).collect(),
            ids: instances.iter().map(|i| i.id.clone()).collect(),
            con_input,
            con_grid,
            centroids,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-instance quantities that carry no gradient: the min-max normalization
/// offsets and the XBL-D distance weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detached {
    pub per_instance: Vec<DetachedStats>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetachedStats {
    pub min: f64,
    pub span: f64,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation<F> {
    pub breakdown: LossBreakdown,
    pub grads: Option<Vec<F>>,
    pub detached: Detached,
}

/// `λ1·CE + λ2·L_expl + λ·Σθ²`, with `L_expl` chosen by `method` (none gives
/// plain weighted cross-entropy).
///
/// Grad-CAM gradients need second derivatives of the logit with respect to the
/// feature maps; they come from one forward-mode tangent pushed through the
/// head followed by a reverse pass over values and tangents together. RRR
/// uses the same mechanism over the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub method: Option<ExplanationMethod>,
    pub coeffs: LossCoefficients,
    /// Intersection threshold ε on normalized activations.
    pub epsilon: f64,
}

impl Objective {
    pub fn new(method: ExplanationMethod, coeffs: LossCoefficients) -> Self {
        Objective {
            method: Some(method),
            coeffs,
            epsilon: 0.0,
        }
    }

    pub fn cross_entropy(coeffs: LossCoefficients) -> Self {
        Objective {
            method: None,
            coeffs,
            epsilon: 0.0,
        }
    }

    pub fn evaluate<F: Scalar>(&self, net: &Network<F>, batch: &PreparedBatch<F>, want_grad: bool) -> Result<Evaluation<F>> {
        self.run(net, batch, want_grad, None)
    }

    /// Like [`Objective::evaluate`] but with the detached quantities pinned to
    /// `frozen` (for finite-difference checks).
    pub fn evaluate_frozen<F: Scalar>(&self, net: &Network<F>, batch: &PreparedBatch<F>, want_grad: bool, frozen: &Detached) -> Result<Evaluation<F>> {
        let uses_cam = matches!(self.method, Some(ExplanationMethod::XblD | ExplanationMethod::RrrG));
        if uses_cam && frozen.per_instance.len() != batch.len() {
            return Err(Error::shape(format!("{} detached entries", batch.len()), frozen.per_instance.len()));
        }
        self.run(net, batch, want_grad, Some(frozen))
    }

    fn run<F: Scalar>(&self, net: &Network<F>, batch: &PreparedBatch<F>, want_grad: bool, frozen: Option<&Detached>) -> Result<Evaluation<F>> {
        self.coeffs.validate()?;
        let mut grads = want_grad.then(|| vec![F::zero(); net.num_params()]);
        let reg: f64 = net.params().iter().map(|p| p.as_f64() * p.as_f64()).sum();
        let (ce, expl, per_instance, detached) = match self.method {
            None => {
                let trace = net.forward(&batch.x, 0, net.num_layers());
                let ce = CeParts::new(trace.output(), &batch.labels, self.coeffs.lambda1)?;
                if let Some(g) = grads.as_deref_mut() {
                    net.backward(&trace, Adjoint::value(ce.seed.clone()), Some(g), false);
                }
                (ce.value, 0.0, Vec::new(), Detached::default())
            }
            Some(ExplanationMethod::Rrr) => self.rrr(net, batch, grads.as_deref_mut())?,
            Some(m) => self.cam(net, batch, m, grads.as_deref_mut(), frozen)?,
        };
        if let Some(g) = grads.as_deref_mut() {
            let two_l = F::of(2.0 * self.coeffs.lambda);
            for (gi, &p) in g.iter_mut().zip(net.params()) {
                *gi += two_l * p;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericInstability("non-finite gradient".into()));
            }
        }
        let breakdown = LossBreakdown::compose(ce, expl, reg, &self.coeffs, per_instance);
        if !breakdown.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite loss (ce {}, expl {}, reg {})",
                breakdown.ce, breakdown.expl, breakdown.reg
            )));
        }
        Ok(Evaluation {
            breakdown,
            grads,
            detached,
        })
    }

    #[allow(clippy::type_complexity)]
    fn cam<F: Scalar>(
        &self,
        net: &Network<F>,
        batch: &PreparedBatch<F>,
        method: ExplanationMethod,
        grads: Option<&mut [F]>,
        frozen: Option<&Detached>,
    ) -> Result<(f64, f64, Vec<f64>, Detached)> {
        let mut pass = cam_pass(net, &batch.x, &batch.labels)?;
        let ce = CeParts::new(pass.logits(), &batch.labels, self.coeffs.lambda1)?;
        let (hs, ws) = pass.grid;
        let s = hs * ws;
        let b = batch.len();
        let ch = pass.channels;
        let diag = grid_diagonal(pass.grid);
        let xbl = method == ExplanationMethod::XblD;

        let mut stats = Vec::with_capacity(b);
        let mut terms = vec![0.0; b];
        for n in 0..b {
            let cam: Vec<f64> = pass.cam(n).map(|v| v.as_f64()).collect();
            if cam.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericInstability("non-finite Grad-CAM activation".into()));
            }
            let con = &batch.con_grid[n * s..(n + 1) * s];
            let st = match frozen {
                Some(f) => f.per_instance[n],
                None => {
                    let max = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let min = cam.iter().copied().fold(f64::INFINITY, f64::min);
                    let span = max - min;
                    let distance = match (xbl, batch.centroids[n]) {
                        (true, Some(g)) if span > 0.0 => {
                            let mut set = IntersectionSet::default();
                            for (i, _) in con.iter().enumerate().filter(|(_, &m)| m) {
                                let v = (cam[i] - min) / span;
                                if v > self.epsilon {
                                    set.coords.push((i / ws, i % ws));
                                    set.activations.push(v as f32);
                                }
                            }
                            distance_score(&set, g, diag)
                        }
                        _ => 0.0,
                    };
                    DetachedStats { min, span, distance }
                }
            };
            let mass = if st.span > 0.0 {
                con.iter().zip(&cam).filter(|(&m, _)| m).map(|(_, &v)| (v - st.min) / st.span).sum()
            } else {
                0.0
            };
            terms[n] = if xbl { st.distance * mass } else { mass };
            stats.push(st);
        }
        let included: Vec<bool> = (0..b).map(|n| !xbl || batch.centroids[n].is_some()).collect();
        let n_incl = included.iter().filter(|&&i| i).count();
        let expl = if xbl {
            if n_incl == 0 {
                0.0
            } else {
                terms.iter().sum::<f64>() / n_incl as f64
            }
        } else {
            terms.iter().sum()
        };

        if let Some(g) = grads {
            let lambda2 = self.coeffs.lambda2;
            let weight: Vec<f64> = (0..b)
                .map(|n| {
                    let st = stats[n];
                    if !included[n] || st.span <= 0.0 || lambda2 == 0.0 {
                        0.0
                    } else if xbl {
                        lambda2 * st.distance / (n_incl as f64 * st.span)
                    } else {
                        lambda2 / st.span
                    }
                })
                .collect();
            let a = pass.trace_conv.output();
            let mut extra = Tensor::<F>::zeros(a.shape());
            let mut adot = Tensor::<F>::zeros(a.shape());
            for n in (0..b).filter(|&n| weight[n] != 0.0) {
                let w = F::of(weight[n]);
                let cells: Vec<usize> = (0..s)
                    .filter(|&i| batch.con_grid[n * s + i] && pass.cam_pre[n * s + i] > F::zero())
                    .collect();
                let an = a.item(n);
                let en = extra.item_mut(n);
                let mut beta = vec![F::zero(); ch];
                for k in 0..ch {
                    let ak = pass.alpha[n * ch + k] * w;
                    for &i in &cells {
                        en[k * s + i] += ak;
                        beta[k] += an[k * s + i];
                    }
                }
                let dn = adot.item_mut(n);
                let inv_s = F::one() / F::of(s as f64);
                for k in 0..ch {
                    let v = w * beta[k] * inv_s;
                    dn[k * s..(k + 1) * s].iter_mut().for_each(|d| *d = v);
                }
            }
            let seed = if weight.iter().any(|&w| w != 0.0) {
                net.push_tangent(&mut pass.trace_head, adot);
                Adjoint {
                    value: Some(ce.seed),
                    tangent: Some(one_hot(&batch.labels, net.num_classes())),
                }
            } else {
                Adjoint::value(ce.seed)
            };
            let mut abar = net
                .backward(&pass.trace_head, seed, Some(&mut *g), true)
                .value
                .expect("feature-map adjoint requested");
            abar.add_assign(&extra);
            net.backward(&pass.trace_conv, Adjoint::value(abar), Some(g), false);
        }
        Ok((ce.value, expl, terms, Detached { per_instance: stats }))
    }

    #[allow(clippy::type_complexity)]
    fn rrr<F: Scalar>(&self, net: &Network<F>, batch: &PreparedBatch<F>, grads: Option<&mut [F]>) -> Result<(f64, f64, Vec<f64>, Detached)> {
        let mut trace = net.forward(&batch.x, 0, net.num_layers());
        let ce = CeParts::new(trace.output(), &batch.labels, self.coeffs.lambda1)?;
        let k = net.num_classes();
        let kf = F::of(k as f64);
        // ∂/∂z Σ_k log p_k = 1 − K·p
        let dz = Tensor::from_vec(&[batch.len(), k], ce.probs.iter().map(|&p| F::one() - kf * p).collect());
        let q = net
            .backward(&trace, Adjoint::value(dz.clone()), None, true)
            .value
            .expect("input adjoint requested");
        let (c, hw) = (q.shape()[1], q.shape()[2] * q.shape()[3]);
        let mut r = Tensor::<F>::zeros(q.shape());
        let mut terms = vec![0.0; batch.len()];
        let two_l2 = F::of(2.0 * self.coeffs.lambda2);
        for n in 0..batch.len() {
            let m = &batch.con_input[n * hw..(n + 1) * hw];
            let qn = q.item(n);
            let rn = r.item_mut(n);
            let mut t = 0.0;
            for ch in 0..c {
                for (i, &mi) in m.iter().enumerate() {
                    let v = mi * qn[ch * hw + i];
                    t += v.as_f64() * v.as_f64();
                    rn[ch * hw + i] = two_l2 * v;
                }
            }
            terms[n] = t;
        }
        if terms.iter().any(|t| !t.is_finite()) {
            return Err(Error::NumericInstability("non-finite input gradient".into()));
        }
        let expl: f64 = terms.iter().sum();
        if let Some(g) = grads {
            let seed = if self.coeffs.lambda2 > 0.0 && expl > 0.0 {
                net.push_tangent(&mut trace, r);
                let zdot = trace.output_tangent().expect("tangent pushed");
                let mut v = ce.seed;
                for n in 0..batch.len() {
                    let p = &ce.probs[n * k..(n + 1) * k];
                    let zd = zdot.item(n);
                    let pz: F = p.iter().zip(zd).map(|(&a, &b)| a * b).sum();
                    for (j, out) in v.item_mut(n).iter_mut().enumerate() {
                        *out -= kf * p[j] * (zd[j] - pz);
                    }
                }
                Adjoint {
                    value: Some(v),
                    tangent: Some(dz),
                }
            } else {
                Adjoint::value(ce.seed)
            };
            net.backward(&trace, seed, Some(g), false);
        }
        Ok((ce.value, expl, terms, Detached::default()))
    }
}

/// Mean cross-entropy, softmax probabilities and the weighted logit seed
/// `λ1 (p − onehot) / B`.
struct CeParts<F> {
    value: f64,
    probs: Vec<F>,
    seed: Tensor<F>,
}

impl<F: Scalar> CeParts<F> {
    fn new(logits: &Tensor<F>, labels: &[usize], lambda1: f64) -> Result<Self> {
        if !logits.all_finite() {
            return Err(Error::NumericInstability("non-finite logits".into()));
        }
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let mut probs = Vec::with_capacity(b * k);
        let mut value = 0.0;
        let scale = F::of(lambda1 / b as f64);
        let mut seed = Tensor::zeros(&[b, k]);
        for n in 0..b {
            let z = logits.item(n);
            let m = z.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            value += (lse - z[labels[n]]).as_f64();
            let row = seed.item_mut(n);
            for j in 0..k {
                let p = (z[j] - lse).exp();
                probs.push(p);
                row[j] = scale * (p - if j == labels[n] { F::one() } else { F::zero() });
            }
        }
        Ok(CeParts {
            value: value / b as f64,
            probs,
            seed,
        })
    }
}

/// XBL-D combined objective on a batch.
pub fn combined_loss(model: &ModelHandle, batch: &[&DecoyInstance], coeffs: LossCoefficients) -> Result<LossBreakdown> {
    let prepared = PreparedBatch::new(&model.net, batch, None)?;
    Ok(Objective::new(ExplanationMethod::XblD, coeffs).evaluate(&model.net, &prepared, false)?.breakdown)
}

fn expl_only(model: &ModelHandle, batch: &[&DecoyInstance], method: ExplanationMethod, eps: f64) -> Result<LossBreakdown> {
    let prepared = PreparedBatch::new(&model.net, batch, None)?;
    let obj = Objective {
        method: Some(method),
        coeffs: LossCoefficients {
            lambda1: 0.0,
            lambda2: 1.0,
            lambda: 0.0,
        },
        epsilon: eps,
    };
    Ok(obj.evaluate(&model.net, &prepared, false)?.breakdown)
}

/// Batch XBL-D explanation loss and the per-instance terms.
pub fn xbl_d_expl_loss(model: &ModelHandle, batch: &[&DecoyInstance], eps: f64) -> Result<(f64, Vec<f64>)> {
    let b = expl_only(model, batch, ExplanationMethod::XblD, eps)?;
    Ok((b.expl, b.per_instance))
}

pub fn rrr_expl_loss(model: &ModelHandle, batch: &[&DecoyInstance]) -> Result<f64> {
    Ok(expl_only(model, batch, ExplanationMethod::Rrr, 0.0)?.expl)
}

pub fn rrr_g_expl_loss(model: &ModelHandle, batch: &[&DecoyInstance]) -> Result<f64> {
    Ok(expl_only(model, batch, ExplanationMethod::RrrG, 0.0)?.expl)
}
