use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::target::{target_ell_from_norm, TargetFnParams};
use crate::codec::ActionCodec;
use crate::dynamics::{CaptionEmbedding, NoiseDraw, NoiseMode, SystemState, ToyDenoiser};
use crate::error::{check_len, Error, Result};
use crate::vecops::mat_vec;

pub const BRT_MAGIC: &[u8; 8] = b"RSTEERBT";
pub const BRT_VERSION: u32 = 1;
pub const BRT_FORMAT: &str = "reachsteer-brt";

/// Regular axis-aligned lattice over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl StateGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        check_len("grid upper bound", lower.len(), upper.len())?;
        check_len("grid point counts", lower.len(), points.len())?;
        if lower.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        for i in 0..lower.len() {
            if !(upper[i] > lower[i]) || points[i] < 2 {
                return Err(Error::Config(format!(
                    "axis {i}: need upper > lower and at least 2 points"
                )));
            }
        }
        Ok(Self { lower, upper, points })
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points[axis] - 1) as f64
    }

    /// Multi-index of a flat index; the last axis varies fastest.
    pub fn unflatten(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            out[a] = idx % self.points[a];
            idx /= self.points[a];
        }
        out
    }

    pub fn flatten(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.points)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        self.unflatten(idx)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + i as f64 * self.spacing(a))
            .collect()
    }

    /// Multilinear interpolation of grid `values`; queries outside the box
    /// are clamped to its boundary.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let n = self.points[a];
            let pos = ((x[a] - self.lower[a]) / self.spacing(a)).clamp(0.0, (n - 1) as f64);
            let i = (pos.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = pos - i as f64;
        }
        let mut acc = 0.0;
        let mut corner = vec![0usize; d];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let hi = (mask >> a) & 1 == 1;
                corner[a] = base[a] + hi as usize;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * values[self.flatten(&corner)];
            }
        }
        acc
    }
}

/// `levels^d` evenly spaced actions covering `[−1, 1]^d`.
pub fn action_lattice(d: usize, levels: usize) -> Vec<Vec<f64>> {
    if levels == 1 {
        return vec![vec![0.0; d]];
    }
    let ticks: Vec<f64> = (0..levels)
        .map(|i| -1.0 + 2.0 * i as f64 / (levels - 1) as f64)
        .collect();
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                ticks.iter().map(move |&t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid: StateGrid,
    pub action_grid: Vec<Vec<f64>>,
}

impl GridSpec {
    /// Box covering three standard deviations of the initial latent and every
    /// attractor the steered dynamics can pull towards, padded by 5%.
    ///
    /// Each guided step is a convex combination of the current latent and an
    /// attractor (for `α·max(g, 1) ≤ 1`), so this box is forward invariant.
    pub fn auto<C: ActionCodec + ?Sized>(
        env: &ToyDenoiser,
        codec: &C,
        points_per_axis: usize,
        action_levels: usize,
    ) -> Result<Self> {
        let cfg = env.config();
        let n = cfg.latent_dim;
        let r0 = 3.0 * cfg.init_std;
        let mut lo = vec![-r0; n];
        let mut hi = vec![r0; n];
        let mut include = |p: &[f64]| {
            for i in 0..n {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        };
        include(&cfg.base_attractor);
        for m in &cfg.memorized_targets {
            include(&m.target);
        }
        let actions = action_lattice(cfg.action_dim, action_levels);
        for c in &cfg.captions {
            for u in &actions {
                include(&mat_vec(&cfg.cond_map, &codec.steer(&c.e, u)?));
            }
        }
        for i in 0..n {
            let pad = 0.05 * (hi[i] - lo[i]);
            lo[i] -= pad;
            hi[i] += pad;
        }
        Ok(Self {
            grid: StateGrid::new(lo, hi, vec![points_per_axis; n])?,
            action_grid: actions,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    /// Warn when the estimated interpolation error exceeds this.
    pub warn_interpolation_error: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            warn_interpolation_error: 0.25,
        }
    }
}

/// Exact reachability values on a grid, one layer per step `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrtGrid {
    pub grid: StateGrid,
    pub horizon: usize,
    pub action_grid: Vec<Vec<f64>>,
    pub target: TargetFnParams,
    pub caption_id: String,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    /// Largest gap between the direct one-step backup and the interpolated
    /// value at cell centres, over all layers.
    pub interpolation_error: f64,
}

#[derive(Serialize, Deserialize)]
struct BrtMeta {
    format: String,
    version: u32,
    horizon: usize,
    axes: Vec<Axis>,
    action_grid: Vec<Vec<f64>>,
    eta: f64,
    beta: f64,
    caption_id: String,
    interpolation_error: f64,
    brt_fraction: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Axis {
    lower: f64,
    upper: f64,
    points: usize,
}

impl BrtGrid {
    pub fn in_brt(&self, step: usize, idx: usize) -> bool {
        self.mask[step][idx]
    }

    /// Fraction of grid points inside the tube, per step.
    pub fn brt_fraction(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
            .collect()
    }

    /// Value at an arbitrary latent by interpolation within layer `step`.
    pub fn value_at(&self, step: usize, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values[step], x)
    }

    pub fn metadata_json(&self) -> Result<String> {
        let meta = BrtMeta {
            format: BRT_FORMAT.into(),
            version: BRT_VERSION,
            horizon: self.horizon,
            axes: (0..self.grid.dim())
                .map(|a| Axis {
                    lower: self.grid.lower[a],
                    upper: self.grid.upper[a],
                    points: self.grid.points[a],
                })
                .collect(),
            action_grid: self.action_grid.clone(),
            eta: self.target.eta,
            beta: self.target.beta,
            caption_id: self.caption_id.clone(),
            interpolation_error: self.interpolation_error,
            brt_fraction: self.brt_fraction(),
        };
        Ok(serde_json::to_string_pretty(&meta)?)
    }

    /// Binary tensor: magic, version, rank, layer count and axis sizes, then
    /// `(T + 1) × N` little-endian values followed by the mask bytes.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BRT_MAGIC)?;
        w.write_u32::<LittleEndian>(BRT_VERSION)?;
        w.write_u32::<LittleEndian>(self.grid.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for &p in &self.grid.points {
            w.write_u32::<LittleEndian>(p as u32)?;
        }
        for layer in &self.values {
            for &v in layer {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for layer in &self.mask {
            for &m in layer {
                w.write_u8(m as u8)?;
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bin = Vec::new();
        self.write_binary(&mut bin)?;
        std::fs::write(stem.with_extension("bin"), bin)?;
        std::fs::write(stem.with_extension("json"), self.metadata_json()?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: BrtMeta = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if meta.format != BRT_FORMAT || meta.version != BRT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {BRT_FORMAT} v{BRT_VERSION}, found {} v{}",
                meta.format, meta.version
            )));
        }
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let mut r: &[u8] = &bytes;
        let bad = |m: &str| Error::Checkpoint(format!("oracle grid: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != BRT_MAGIC {
            return Err(bad("bad magic"));
        }
        let trunc = |_| bad("truncated");
        if r.read_u32::<LittleEndian>().map_err(trunc)? != BRT_VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let layers = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut points = Vec::with_capacity(dim);
        for _ in 0..dim {
            points.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        let grid = StateGrid::new(
            meta.axes.iter().map(|a| a.lower).collect(),
            meta.axes.iter().map(|a| a.upper).collect(),
            meta.axes.iter().map(|a| a.points).collect(),
        )?;
        if grid.points != points || layers != meta.horizon + 1 {
            return Err(bad("binary shape disagrees with metadata"));
        }
        let n = grid.len();
        let mut values = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut layer = Vec::with_capacity(n);
            for _ in 0..n {
                layer.push(r.read_f64::<LittleEndian>().map_err(trunc)?);
            }
            values.push(layer);
        }
        let mut mask = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut layer = Vec::with_capacity(n);
            for _ in 0..n {
                layer.push(r.read_u8().map_err(trunc)? != 0);
            }
            mask.push(layer);
        }
        Ok(Self {
            grid,
            horizon: meta.horizon,
            action_grid: meta.action_grid,
            target: TargetFnParams {
                eta: meta.eta,
                beta: meta.beta,
            },
            caption_id: meta.caption_id,
            values,
            mask,
            interpolation_error: meta.interpolation_error,
        })
    }
}

/// Finite-horizon max-min backward induction on a grid.
///
/// `V(x, T) = max_a ℓ(x, T, a)` and
/// `V(x, t) = max_a min(ℓ(x, t, a), V(f(x, t, a), t + 1))`, with `V(·, t + 1)`
/// interpolated on the grid. Layers are computed sequentially, grid points
/// within a layer in parallel.
pub fn backward_induction<L, F>(
    grid: &StateGrid,
    horizon: usize,
    n_actions: usize,
    ell: L,
    step: F,
) -> Result<Vec<Vec<f64>>>
where
    L: Fn(&[f64], usize, usize) -> Result<f64> + Sync,
    F: Fn(&[f64], usize, usize) -> Result<Vec<f64>> + Sync,
{
    if n_actions == 0 {
        return Err(Error::Config("action grid is empty".into()));
    }
    let mut layers = vec![Vec::new(); horizon + 1];
    layers[horizon] = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.coords(i);
            (0..n_actions).try_fold(f64::NEG_INFINITY, |best, a| Ok(best.max(ell(&x, horizon, a)?)))
        })
        .collect::<Result<Vec<f64>>>()?;
    for t in (0..horizon).rev() {
        let next = &layers[t + 1];
        let layer = (0..grid.len())
            .into_par_iter()
            .map(|i| backup_point(grid, next, &grid.coords(i), t, n_actions, &ell, &step))
            .collect::<Result<Vec<f64>>>()?;
        layers[t] = layer;
    }
    Ok(layers)
}

fn backup_point<L, F>(
    grid: &StateGrid,
    next: &[f64],
    x: &[f64],
    t: usize,
    n_actions: usize,
    ell: &L,
    step: &F,
) -> Result<f64>
where
    L: Fn(&[f64], usize, usize) -> Result<f64>,
    F: Fn(&[f64], usize, usize) -> Result<Vec<f64>>,
{
    let mut best = f64::NEG_INFINITY;
    for a in 0..n_actions {
        let l = ell(x, t, a)?;
        let v = grid.interpolate(next, &step(x, t, a)?);
        best = best.max(l.min(v));
    }
    Ok(best)
}

/// Exhaustive reachability oracle of the toy system for one caption.
pub fn compute_brt_oracle<C: ActionCodec + Sync + ?Sized>(
    env: &ToyDenoiser,
    codec: &C,
    caption: &CaptionEmbedding,
    target: &TargetFnParams,
    spec: &GridSpec,
    opts: &OracleOptions,
) -> Result<BrtGrid> {
    let cfg = env.config();
    if cfg.noise_mode != NoiseMode::Ddim {
        return Err(Error::Unsupported(
            "the reachability oracle needs deterministic (DDIM) dynamics".into(),
        ));
    }
    if cfg.latent_dim > 3 {
        return Err(Error::Unsupported(format!(
            "grid oracle supports at most 3 latent dimensions, got {}",
            cfg.latent_dim
        )));
    }
    check_len("grid dimension", cfg.latent_dim, spec.grid.dim())?;
    target.validate()?;
    for u in &spec.action_grid {
        check_len("grid action", cfg.action_dim, u.len())?;
        if u.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::Config("grid actions must lie in [-1, 1]".into()));
        }
    }
    let horizon = cfg.horizon;
    let steered: Vec<Vec<f64>> = spec
        .action_grid
        .iter()
        .map(|u| codec.steer(&caption.e, u))
        .collect::<Result<_>>()?;
    let zero = NoiseDraw::zero(cfg.latent_dim);
    let ell = |x: &[f64], t: usize, a: usize| -> Result<f64> {
        let n = env.guidance_norm(x, &steered[a], horizon - t)?;
        Ok(target_ell_from_norm(n, target))
    };
    let step = |x: &[f64], t: usize, a: usize| -> Result<Vec<f64>> {
        Ok(env.step(&SystemState::new(x.to_vec(), t), &steered[a], &zero)?.x)
    };
    let values = backward_induction(&spec.grid, horizon, steered.len(), ell, step)?;

    // Interpolation error: direct backup at cell centres vs interpolated layer.
    let centres = cell_centres(&spec.grid);
    let mut err: f64 = 0.0;
    for t in 0..horizon {
        let e = centres
            .par_iter()
            .map(|c| {
                let direct = backup_point(&spec.grid, &values[t + 1], c, t, steered.len(), &ell, &step)?;
                Ok((direct - spec.grid.interpolate(&values[t], c)).abs())
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        err = err.max(e);
    }
    if err > opts.warn_interpolation_error {
        log::warn!(
            "oracle grid may be too coarse: estimated interpolation error {err:.3} \
             exceeds {:.3}",
            opts.warn_interpolation_error
        );
    }
    let mask = values
        .iter()
        .map(|layer| layer.iter().map(|&v| v <= 0.0).collect())
        .collect();
    Ok(BrtGrid {
        grid: spec.grid.clone(),
        horizon,
        action_grid: spec.action_grid.clone(),
        target: *target,
        caption_id: caption.id.clone(),
        values,
        mask,
        interpolation_error: err,
    })
}

fn cell_centres(grid: &StateGrid) -> Vec<Vec<f64>> {
    let cells = StateGrid {
        lower: (0..grid.dim()).map(|a| grid.lower[a] + 0.5 * grid.spacing(a)).collect(),
        upper: (0..grid.dim()).map(|a| grid.upper[a] - 0.5 * grid.spacing(a)).collect(),
        points: grid.points.iter().map(|p| p - 1).collect(),
    };
    if cells.points.iter().any(|&p| p < 2) {
        return Vec::new();
    }
    (0..cells.len()).map(|i| cells.coords(i)).collect()
}

/// Fraction of disagreeing mask entries over all layers.
pub fn mask_hamming(a: &BrtGrid, b: &BrtGrid) -> Result<f64> {
    if a.grid != b.grid || a.horizon != b.horizon {
        return Err(Error::Config("grids differ".into()));
    }
    let mut diff = 0usize;
    let mut total = 0usize;
    for (la, lb) in a.mask.iter().zip(&b.mask) {
        diff += la.iter().zip(lb).filter(|(x, y)| x != y).count();
        total += la.len();
    }
    Ok(diff as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStep {
    pub points_per_axis: usize,
    /// Mask disagreement with the next finer grid on the shared lattice
    /// points; `None` for the finest grid.
    pub hamming_to_finer: Option<f64>,
    pub interpolation_error: f64,
}

/// Solves on successively refined grids (`n`, `2n − 1`, `4n − 3`, ...) so each
/// coarse lattice point is also a fine one, and reports how much the mask
/// changes per refinement.
pub fn refinement_study<C: ActionCodec + Sync + ?Sized>(
    env: &ToyDenoiser,
    codec: &C,
    caption: &CaptionEmbedding,
    target: &TargetFnParams,
    coarse: &GridSpec,
    levels: usize,
) -> Result<Vec<RefinementStep>> {
    let mut grids = Vec::with_capacity(levels);
    let mut spec = coarse.clone();
    for _ in 0..levels.max(1) {
        grids.push(compute_brt_oracle(env, codec, caption, target, &spec, &OracleOptions {
            warn_interpolation_error: f64::INFINITY,
        })?);
        spec.grid.points = spec.grid.points.iter().map(|p| 2 * p - 1).collect();
    }
    let mut out = Vec::with_capacity(grids.len());
    for k in 0..grids.len() {
        let hamming = grids.get(k + 1).map(|fine| {
            let coarse = &grids[k];
            let mut diff = 0usize;
            let mut total = 0usize;
            for t in 0..=coarse.horizon {
                for i in 0..coarse.grid.len() {
                    let multi: Vec<usize> =
                        coarse.grid.unflatten(i).iter().map(|&j| 2 * j).collect();
                    let j = fine.grid.flatten(&multi);
                    diff += (coarse.mask[t][i] != fine.mask[t][j]) as usize;
                    total += 1;
                }
            }
            diff as f64 / total as f64
        });
        out.push(RefinementStep {
            points_per_axis: grids[k].grid.points[0],
            hamming_to_finer: hamming,
            interpolation_error: grids[k].interpolation_error,
        });
    }
    Ok(out)
}

/// Fraction of `(x, t)` grid points, `t` in `steps`, where `critic(x, t) ≤ 0`
/// agrees with oracle membership.
pub fn sign_agreement<F>(brt: &BrtGrid, steps: std::ops::Range<usize>, critic: F) -> Result<f64>
where
    F: Fn(&[f64], usize) -> Result<f64> + Sync,
{
    if steps.end > brt.horizon + 1 || steps.is_empty() {
        return Err(Error::Config(format!("step range {steps:?} outside the oracle horizon")));
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for t in steps {
        let hits = (0..brt.grid.len())
            .into_par_iter()
            .map(|i| Ok(((critic(&brt.grid.coords(i), t)? <= 0.0) == brt.mask[t][i]) as usize))
            .collect::<Result<Vec<usize>>>()?;
        agree += hits.iter().sum::<usize>();
        total += hits.len();
    }
    Ok(agree as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_counts_and_bounds() {
        let a = action_lattice(2, 3);
        assert_eq!(a.len(), 9);
        assert!(a.contains(&vec![0.0, 0.0]));
        assert!(a.contains(&vec![-1.0, 1.0]));
        assert_eq!(action_lattice(2, 1), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn interpolation_is_exact_on_affine_functions() {
        let g = StateGrid::new(vec![-1.0, 0.0], vec![1.0, 4.0], vec![5, 9]).unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                3.0 * c[0] - 0.5 * c[1] + 1.0
            })
            .collect();
        for x in [[0.13, 2.71], [-0.99, 0.01], [0.5, 3.3]] {
            let want = 3.0 * x[0] - 0.5 * x[1] + 1.0;
            assert!((g.interpolate(&vals, &x) - want).abs() < 1e-12);
        }
        // Clamped outside.
        let edge = g.interpolate(&vals, &[5.0, -3.0]);
        assert!((edge - (3.0 * 1.0 - 0.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let g = StateGrid::new(vec![0.0; 3], vec![1.0; 3], vec![2, 3, 4]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.flatten(&g.unflatten(i)), i);
        }
    }
}
