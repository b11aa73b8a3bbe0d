//! Bidirectional atlas-to-target registration.
//!
//! The forward field `U` (atlas → target) and backward field `V` are
//! parameterized by displacements at the nodes of a regular control grid and
//! expanded to dense fields by trilinear interpolation. Both grids are
//! optimized jointly on `L_Dice + λ·L_cons` with bias-corrected moment
//! updates; a proposal that raises the loss is rejected and the step halved,
//! so the recorded loss trace never increases.
//!
//! Only label overlap and self-restoration residuals enter the loss, never
//! intensity similarity between the two images, so atlas and target may come
//! from different modalities.

use serde::{Deserialize, Serialize};

use crate::ddf::{warp_label, DisplacementField};
use crate::error::{check_dims, Error, Result};
use crate::filter::GaussianSmoother;
use crate::interp::Stencil;
use crate::losses::{l1_grad, total_loss, ConsistencyTerms, LossBreakdown, MultiScaleDiceTarget, ScaleSet, DEFAULT_LAMBDA};
use crate::metrics::foreground_dice;
use crate::volume::{one_hot, Grid, LabelMap, Volume};

const ADAM_EPS: f64 = 1e-8;

/// Iterations over which `convergence_tol` is measured.
pub const CONVERGENCE_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub lambda: f64,
    pub scales: ScaleSet,
    /// Control node spacing in voxels.
    pub control_spacing: usize,
    pub iterations: usize,
    /// Base step in voxels per update.
    pub step_size: f64,
    pub moment_coeffs: [f64; 2],
    /// Gaussian width, in control nodes, applied to the gradient of every
    /// field component before each update; 0 uses the raw gradient.
    pub gradient_smoothing: f64,
    /// Stop once the total loss improves by less than this over
    /// [`CONVERGENCE_WINDOW`] iterations; 0 always runs to `iterations`.
    pub convergence_tol: f64,
    /// Recorded for provenance; the optimizer itself draws no random numbers.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            scales: ScaleSet::default(),
            control_spacing: 4,
            iterations: 300,
            step_size: 0.3,
            moment_coeffs: [0.9, 0.999],
            gradient_smoothing: 3.0,
            convergence_tol: 1e-4,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.control_spacing < 1 {
            return bad("control_spacing must be at least 1".into());
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(self.gradient_smoothing >= 0.0) || !self.gradient_smoothing.is_finite() {
            return bad(format!("gradient_smoothing must be non-negative, got {}", self.gradient_smoothing));
        }
        if !(self.convergence_tol >= 0.0) || !self.convergence_tol.is_finite() {
            return bad(format!("convergence_tol must be non-negative, got {}", self.convergence_tol));
        }
        if self.moment_coeffs.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("moment coefficients must lie in [0, 1), got {:?}", self.moment_coeffs));
        }
        Ok(())
    }
}

/// Regular grid of control nodes spaced `spacing` voxels apart, with node 0
/// on voxel 0 and the last node at or beyond the last voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub field_grid: Grid,
    pub spacing: usize,
    pub nodes: [usize; 3],
    /// Per axis, per voxel coordinate: (lower node, upper node, fraction).
    cells: [Vec<(usize, usize, f64)>; 3],
}

impl ControlGrid {
    pub fn new(field_grid: Grid, spacing: usize) -> Result<Self> {
        if spacing < 1 {
            return Err(Error::InvalidArgument("control spacing must be at least 1".into()));
        }
        let nodes = field_grid.dims.map(|n| if n == 1 { 1 } else { (n - 1).div_ceil(spacing) + 1 });
        let cells = std::array::from_fn(|a| {
            (0..field_grid.dims[a])
                .map(|x| {
                    if nodes[a] == 1 {
                        return (0, 0, 0.0);
                    }
                    let lo = (x / spacing).min(nodes[a] - 2);
                    let t = (x - lo * spacing) as f64 / spacing as f64;
                    (lo, lo + 1, t)
                })
                .collect()
        });
        Ok(Self { field_grid, spacing, nodes, cells })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Parameters for one field: three components, each `node_count` long.
    pub fn field_param_len(&self) -> usize {
        3 * self.node_count()
    }

    #[inline]
    fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nodes[0] * (y + self.nodes[1] * z)
    }

    /// Calls `f(voxel, node, weight)` for the eight nodes weighting each voxel.
    fn for_each_weight(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [nx, ny, nz] = self.field_grid.dims;
        let mut i = 0;
        for z in 0..nz {
            let (z0, z1, tz) = self.cells[2][z];
            for y in 0..ny {
                let (y0, y1, ty) = self.cells[1][y];
                for x in 0..nx {
                    let (x0, x1, tx) = self.cells[0][x];
                    for (zn, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        for (yn, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (xn, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                f(i, self.node_index(xn, yn, zn), wx * wy * wz);
                            }
                        }
                    }
                    i += 1;
                }
            }
        }
    }

    /// Dense field by trilinear interpolation of node displacements; exact at nodes.
    pub fn expand(&self, params: &[f64]) -> DisplacementField {
        assert_eq!(params.len(), self.field_param_len(), "control parameter length");
        let m = self.node_count();
        let n = self.field_grid.len();
        let mut comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        self.for_each_weight(|i, node, w| {
            for a in 0..3 {
                comps[a][i] += w * params[a * m + node];
            }
        });
        DisplacementField { grid: self.field_grid, components: comps }
    }

    /// Adjoint of [`expand`](Self::expand): pulls a dense per-voxel gradient back to node parameters.
    pub fn expand_adjoint(&self, dense: &[Vec<f64>; 3]) -> Vec<f64> {
        let m = self.node_count();
        let mut out = vec![0.0; 3 * m];
        self.for_each_weight(|i, node, w| {
            for a in 0..3 {
                out[a * m + node] += w * dense[a][i];
            }
        });
        out
    }
}

/// Optimizer state: node displacements of `U` followed by those of `V`, plus
/// first/second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationState {
    pub params: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub iteration: u64,
}

impl RegistrationState {
    pub fn zeros(grid: &ControlGrid) -> Self {
        let n = 2 * grid.field_param_len();
        Self { params: vec![0.0; n], first_moment: vec![0.0; n], second_moment: vec![0.0; n], iteration: 0 }
    }

    pub fn u_params<'a>(&'a self, grid: &ControlGrid) -> &'a [f64] {
        &self.params[..grid.field_param_len()]
    }

    pub fn v_params<'a>(&'a self, grid: &ControlGrid) -> &'a [f64] {
        &self.params[grid.field_param_len()..]
    }
}

/// Dense `(U, V)` of a state.
pub fn expand_control_grid(grid: &ControlGrid, state: &RegistrationState) -> (DisplacementField, DisplacementField) {
    (grid.expand(state.u_params(grid)), grid.expand(state.v_params(grid)))
}

/// One bias-corrected moment update using `config.step_size`.
pub fn gradient_step(state: &RegistrationState, grads: &[f64], config: &RegistrationConfig) -> RegistrationState {
    step_with_rate(state, grads, config.moment_coeffs, config.step_size)
}

fn step_with_rate(state: &RegistrationState, grads: &[f64], [b1, b2]: [f64; 2], rate: f64) -> RegistrationState {
    assert_eq!(grads.len(), state.params.len(), "gradient length");
    let t = state.iteration + 1;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut next = state.clone();
    next.iteration = t;
    for (k, &g) in grads.iter().enumerate() {
        let m = b1 * state.first_moment[k] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[k] + (1.0 - b2) * g * g;
        next.first_moment[k] = m;
        next.second_moment[k] = v;
        next.params[k] -= rate * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
    }
    next
}

/// The registration loss as a differentiable function of the control
/// parameters of both fields.
pub struct Objective<'a> {
    grid: ControlGrid,
    atlas_img: &'a Volume,
    target_img: &'a Volume,
    atlas_fg: Vec<Vec<f64>>,
    target_fg: Vec<Vec<f64>>,
    /// `D_s(L_t, L̃_a)`
    to_target: MultiScaleDiceTarget,
    /// `D_s(L_a, L̃_t)`
    to_atlas: MultiScaleDiceTarget,
    lambda: f64,
    su: Vec<Stencil>,
    sv: Vec<Stencil>,
}

impl<'a> Objective<'a> {
    pub fn new(
        atlas_img: &'a Volume,
        atlas_label: &LabelMap,
        target_img: &'a Volume,
        target_label: &LabelMap,
        config: &RegistrationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let dims = target_img.grid.dims;
        check_dims(dims, atlas_img.grid.dims)?;
        check_dims(dims, atlas_label.grid.dims)?;
        check_dims(dims, target_label.grid.dims)?;
        if atlas_label.label_set != target_label.label_set {
            return Err(Error::LabelSetMismatch(atlas_label.label_set.clone(), target_label.label_set.clone()));
        }
        if atlas_label.label_set.len() < 2 {
            return Err(Error::InvalidArgument("registration needs at least one foreground label".into()));
        }
        let oh_a = one_hot(atlas_label);
        let oh_t = one_hot(target_label);
        let to_target = MultiScaleDiceTarget::new(&oh_t, &config.scales);
        let to_atlas = MultiScaleDiceTarget::new(&oh_a, &config.scales);
        let atlas_fg = to_target.fg.iter().map(|&c| oh_a.channels[c].clone()).collect();
        let target_fg = to_atlas.fg.iter().map(|&c| oh_t.channels[c].clone()).collect();
        Ok(Self {
            grid: ControlGrid::new(target_img.grid, config.control_spacing)?,
            atlas_img,
            target_img,
            atlas_fg,
            target_fg,
            to_target,
            to_atlas,
            lambda: config.lambda,
            su: Vec::new(),
            sv: Vec::new(),
        })
    }

    pub fn control_grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn param_len(&self) -> usize {
        2 * self.grid.field_param_len()
    }

    /// Loss breakdown and gradient with respect to all control parameters.
    pub fn evaluate(&mut self, params: &[f64]) -> (LossBreakdown, Vec<f64>) {
        assert_eq!(params.len(), self.param_len(), "parameter length");
        let m = self.grid.field_param_len();
        let u = self.grid.expand(&params[..m]);
        let v = self.grid.expand(&params[m..]);
        u.fill_stencils(&mut self.su);
        v.fill_stencils(&mut self.sv);
        let n = u.grid.len();
        let mut gu = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut gv = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];

        let d_t = dice_term(&self.to_target, &self.atlas_fg, &self.su, &mut gu);
        let d_a = dice_term(&self.to_atlas, &self.target_fg, &self.sv, &mut gv);

        let weight = self.lambda / n as f64;
        let sum_a = cycle_term(&self.atlas_img.data, &self.su, &self.sv, weight, &mut gu, &mut gv);
        let sum_t = cycle_term(&self.target_img.data, &self.sv, &self.su, weight, &mut gv, &mut gu);
        let cons = ConsistencyTerms { sum: sum_a + sum_t, mean: (sum_a + sum_t) / n as f64 };

        let breakdown = total_loss(-d_t - d_a, cons, self.lambda).expect("lambda validated at construction");
        let mut grad = self.grid.expand_adjoint(&gu);
        grad.extend(self.grid.expand_adjoint(&gv));
        (breakdown, grad)
    }
}

/// Multi-scale Dice of the warped moving labels against the fixed side; adds
/// `-dD/dfield` into `gfield`.
fn dice_term(target: &MultiScaleDiceTarget, moving: &[Vec<f64>], st: &[Stencil], gfield: &mut [Vec<f64>; 3]) -> f64 {
    let warped: Vec<Vec<f64>> = moving.iter().map(|ch| st.iter().map(|s| s.value(ch)).collect()).collect();
    let (value, dq) = target.value_grad(&warped);
    for (k, ch) in moving.iter().enumerate() {
        for (i, s) in st.iter().enumerate() {
            let up = dq[k][i];
            if up != 0.0 {
                let g = s.gradient(ch);
                for a in 0..3 {
                    gfield[a][i] -= up * g[a];
                }
            }
        }
    }
    value
}

/// Restoration residual `Σ_x |w(x + b(x)) − img(x)|` with `w(y) = img(y + f(y))`,
/// where `sf`/`sb` are the stencils of the forward/backward fields. Adds
/// `weight · d|r|` into both field gradients and returns the residual sum.
fn cycle_term(
    img: &[f64],
    sf: &[Stencil],
    sb: &[Stencil],
    weight: f64,
    gf: &mut [Vec<f64>; 3],
    gb: &mut [Vec<f64>; 3],
) -> f64 {
    let warped: Vec<f64> = sf.iter().map(|s| s.value(img)).collect();
    let mut sum = 0.0;
    let mut upstream = vec![0.0; img.len()];
    for (i, s) in sb.iter().enumerate() {
        let r = s.value(&warped) - img[i];
        sum += r.abs();
        if weight == 0.0 {
            continue;
        }
        let d = weight * l1_grad(r);
        if d != 0.0 {
            let g = s.gradient(&warped);
            for a in 0..3 {
                gb[a][i] += d * g[a];
            }
            s.scatter(d, &mut upstream);
        }
    }
    if weight != 0.0 {
        for (i, s) in sf.iter().enumerate() {
            let up = upstream[i];
            if up != 0.0 {
                let g = s.gradient(img);
                for a in 0..3 {
                    gf[a][i] += up * g[a];
                }
            }
        }
    }
    sum
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub u: DisplacementField,
    pub v: DisplacementField,
    /// Loss of the accepted iterate after each evaluation; entry 0 is the zero field.
    pub trace: Vec<LossBreakdown>,
    pub state: RegistrationState,
    /// Foreground Dice (%) of the atlas label warped by the zero field and by `u`.
    pub initial_dice: f64,
    pub final_dice: f64,
}

#[derive(Serialize)]
struct TraceLine {
    iteration: usize,
    dice_term: f64,
    cons_term: f64,
    total: f64,
}

impl RegistrationResult {
    pub fn iterations_run(&self) -> usize {
        self.trace.len()
    }

    /// One JSON object per line: iteration, dice_term, cons_term, total.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for (iteration, b) in self.trace.iter().enumerate() {
            let line = TraceLine { iteration, dice_term: b.dice_term, cons_term: b.cons_term, total: b.total };
            out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }
}

/// Jointly estimates `U` (atlas → target) and `V` (target → atlas).
pub fn register_bidirectional(
    atlas_img: &Volume,
    atlas_label: &LabelMap,
    target_img: &Volume,
    target_label: &LabelMap,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let mut objective = Objective::new(atlas_img, atlas_label, target_img, target_label, config)?;
    let grid = objective.control_grid().clone();
    let mut state = RegistrationState::zeros(&grid);

    let (mut current, mut grad) = objective.evaluate(&state.params);
    if !current.total.is_finite() {
        return Err(Error::Diverged { iteration: 0 });
    }
    let mut trace = Vec::with_capacity(config.iterations);
    trace.push(current);

    let smoother = GaussianSmoother::new(grid.nodes, config.gradient_smoothing);
    let precondition = |g: Vec<f64>| -> Vec<f64> {
        if config.gradient_smoothing == 0.0 {
            return g;
        }
        g.chunks(grid.node_count()).flat_map(|block| smoother.smooth(block)).collect()
    };
    grad = precondition(grad);

    let mut rate = config.step_size;
    let min_rate = config.step_size * 1e-4;
    for it in 1..config.iterations {
        if rate < min_rate {
            break;
        }
        let proposal = step_with_rate(&state, &grad, config.moment_coeffs, rate);
        let (loss, g) = objective.evaluate(&proposal.params);
        if !loss.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        if loss.total <= current.total {
            state = proposal;
            current = loss;
            grad = precondition(g);
            rate = (rate * 1.2).min(config.step_size);
        } else {
            // Stale momentum need not point downhill; restart it from the current gradient.
            state.first_moment.iter_mut().for_each(|m| *m = 0.0);
            rate *= 0.5;
        }
        trace.push(current);
        if config.convergence_tol > 0.0 && trace.len() > CONVERGENCE_WINDOW {
            let earlier = trace[trace.len() - 1 - CONVERGENCE_WINDOW].total;
            if earlier - current.total < config.convergence_tol {
                break;
            }
        }
    }

    let (u, v) = expand_control_grid(&grid, &state);
    let initial_dice = foreground_dice(atlas_label, target_label)?;
    let final_dice = foreground_dice(&warp_label(atlas_label, &u)?, target_label)?;
    Ok(RegistrationResult { u, v, trace, state, initial_dice, final_dice })
}
