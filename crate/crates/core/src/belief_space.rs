//! Discretized belief space and belief-transition operators.
//!
//! Each box's belief (probability that food is available) is tracked on a
//! uniform grid of `N` bins. A bin's mass is split into `M` equal sub-cells;
//! each sub-cell is pushed through the exact Bayesian update and spread over
//! its image interval with a smooth bump (quintic smoothstep cumulative), which
//! is then intersected with the destination bins. Rows where the box was just
//! opened collapse to a single point (the belief is reset to zero before the
//! update); that point is split between the two nearest bin centers with the
//! same smoothstep weights. Operators are therefore twice differentiable in
//! the model parameters.
//! Finally a tridiagonal diffusion kernel spreads mass to neighboring bins.
//!
//! The two boxes evolve independently in the agent's model, so operators are
//! stored per box and the joint transition over `N * N` bins is their
//! Kronecker product.

use std::io::Write;

use ndarray::{Array1, Array2};

use crate::error::{IrcError, Result};
use crate::params::{AgentModel, Param};
use crate::task_env::{binomial_pmf, binomial_pmf_dq, Action, Location, TaskLayout};

/// Uniform discretization of a single box's belief.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    n_bins: usize,
    quadrature: usize,
    edges: Vec<f64>,
    centers: Vec<f64>,
}

impl BeliefGrid {
    pub fn new(n_bins: usize, quadrature: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(IrcError::Domain(format!("need at least 2 belief bins, got {n_bins}")));
        }
        if quadrature < 1 {
            return Err(IrcError::Domain("quadrature must be at least 1".into()));
        }
        let width = 1.0 / n_bins as f64;
        let mut edges: Vec<f64> = (0..=n_bins).map(|k| k as f64 * width).collect();
        edges[n_bins] = 1.0;
        let centers = (0..n_bins).map(|k| (k as f64 + 0.5) * width).collect();
        Ok(BeliefGrid {
            n_bins,
            quadrature,
            edges,
            centers,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Number of joint (box 1, box 2) bins.
    pub fn n_joint(&self) -> usize {
        self.n_bins * self.n_bins
    }

    pub fn quadrature(&self) -> usize {
        self.quadrature
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    fn width(&self) -> f64 {
        1.0 / self.n_bins as f64
    }

    /// Bin containing belief `b`; the top edge belongs to the last bin.
    pub fn bin_of(&self, b: f64) -> usize {
        ((b * self.n_bins as f64).floor().max(0.0) as usize).min(self.n_bins - 1)
    }

    pub fn joint_index(&self, bin1: usize, bin2: usize) -> usize {
        bin1 * self.n_bins + bin2
    }

    pub fn split_joint(&self, joint: usize) -> (usize, usize) {
        (joint / self.n_bins, joint % self.n_bins)
    }
}

/// Exact one-step belief update for one box.
///
/// If the box was opened the belief first resets to zero. The belief is then
/// propagated through the assumed telegraph prior and conditioned on the
/// color (`None` when the box was not seen).
pub fn belief_update_continuous(
    b: f64,
    box_opened: bool,
    color: Option<usize>,
    model: &AgentModel,
    box_index: usize,
    n_colors: usize,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&b) {
        return Err(IrcError::Domain(format!("belief {b} outside [0, 1]")));
    }
    if box_index > 1 {
        return Err(IrcError::Domain(format!("box index {box_index} out of range")));
    }
    if let Some(c) = color {
        if c >= n_colors {
            return Err(IrcError::Domain(format!(
                "color {c} out of range for {n_colors} colors"
            )));
        }
    }
    let kernel = BoxKernel::new(model, box_index, n_colors);
    Ok(kernel.eval(b, box_opened, color).post.v)
}

/// Number of local parameters a single box's update depends on:
/// appear, disappear, q_absent, q_present.
const LOCAL: usize = 4;

/// Value with derivatives in the four local parameters.
#[derive(Debug, Clone, Copy, Default)]
struct Dual {
    v: f64,
    d: [f64; LOCAL],
}

impl Dual {
    fn scale(self, s: f64) -> Dual {
        Dual {
            v: self.v * s,
            d: self.d.map(|x| x * s),
        }
    }

    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; LOCAL];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }

    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        for i in 0..LOCAL {
            self.d[i] += o.d[i];
        }
    }
}

struct UpdatePoint {
    /// Posterior belief.
    post: Dual,
    /// P(color | prior belief); 1 when unseen.
    like: Dual,
}

/// One box's belief update under an agent model.
struct BoxKernel {
    appear: f64,
    disappear: f64,
    lik_absent: Vec<f64>,
    lik_present: Vec<f64>,
    dlik_absent: Vec<f64>,
    dlik_present: Vec<f64>,
}

impl BoxKernel {
    fn new(model: &AgentModel, box_index: usize, n_colors: usize) -> Self {
        let m = n_colors - 1;
        BoxKernel {
            appear: model.appear[box_index],
            disappear: model.disappear[box_index],
            lik_absent: (0..n_colors).map(|c| binomial_pmf(c, m, model.q_absent)).collect(),
            lik_present: (0..n_colors).map(|c| binomial_pmf(c, m, model.q_present)).collect(),
            dlik_absent: (0..n_colors).map(|c| binomial_pmf_dq(c, m, model.q_absent)).collect(),
            dlik_present: (0..n_colors).map(|c| binomial_pmf_dq(c, m, model.q_present)).collect(),
        }
    }

    fn eval(&self, b: f64, opened: bool, color: Option<usize>) -> UpdatePoint {
        let prior = if opened { 0.0 } else { b };
        let keep = 1.0 - self.appear - self.disappear;
        let p = self.appear + prior * keep;
        let dp = [1.0 - prior, -prior, 0.0, 0.0];
        let Some(c) = color else {
            return UpdatePoint {
                post: Dual { v: p, d: dp },
                like: Dual { v: 1.0, d: [0.0; LOCAL] },
            };
        };
        let (l1, l0) = (self.lik_present[c], self.lik_absent[c]);
        let (dl1, dl0) = (self.dlik_present[c], self.dlik_absent[c]);
        let evidence = p * l1 + (1.0 - p) * l0;
        let post = p * l1 / evidence;
        let e2 = evidence * evidence;
        let df_dp = l1 * l0 / e2;
        let df_dl1 = p * (1.0 - p) * l0 / e2;
        let df_dl0 = -p * (1.0 - p) * l1 / e2;
        let post_d = [
            df_dp * dp[0],
            df_dp * dp[1],
            df_dl0 * dl0,
            df_dl1 * dl1,
        ];
        let like_d = [
            (l1 - l0) * dp[0],
            (l1 - l0) * dp[1],
            (1.0 - p) * dl0,
            p * dl1,
        ];
        UpdatePoint {
            post: Dual { v: post, d: post_d },
            like: Dual {
                v: evidence,
                d: like_d,
            },
        }
    }
}

/// Quintic smoothstep on [0, 1] and its derivative.
fn smoothstep(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0)
    } else {
        let u2 = u * u;
        let v = u2 * u * (10.0 - 15.0 * u + 6.0 * u2);
        let omu = 1.0 - u;
        (v, 30.0 * u2 * omu * omu)
    }
}

/// Split a point mass at `x` between the two nearest bin centers.
fn deposit_point(grid: &BeliefGrid, x: Dual, weight: Dual, row: &mut [Dual]) {
    let n = grid.n_bins;
    let w = grid.width();
    let c0 = grid.centers[0];
    if x.v <= c0 {
        row[0].add_assign(weight);
        return;
    }
    if x.v >= grid.centers[n - 1] {
        row[n - 1].add_assign(weight);
        return;
    }
    let k = (((x.v - c0) / w).floor() as usize).min(n - 2);
    let (s, ds) = smoothstep((x.v - grid.centers[k]) / w);
    let t = Dual {
        v: s,
        d: x.d.map(|dx| ds * dx / w),
    };
    let one_minus_t = Dual {
        v: 1.0 - t.v,
        d: t.d.map(|dx| -dx),
    };
    row[k].add_assign(weight.mul(one_minus_t));
    row[k + 1].add_assign(weight.mul(t));
}

/// Spread `weight` over `[lo, hi]` with a smooth bump and intersect with the bins.
fn deposit_interval(grid: &BeliefGrid, lo: Dual, hi: Dual, weight: Dual, row: &mut [Dual]) {
    let width = hi.v - lo.v;
    if width < 1e-12 {
        let mid = Dual {
            v: 0.5 * (lo.v + hi.v),
            d: std::array::from_fn(|i| 0.5 * (lo.d[i] + hi.d[i])),
        };
        deposit_point(grid, mid, weight, row);
        return;
    }
    // Cumulative mass below edge e, with its derivative.
    let cdf = |e: f64| -> Dual {
        let u = (e - lo.v) / width;
        let (v, dv) = smoothstep(u);
        Dual {
            v,
            d: std::array::from_fn(|i| -dv * (lo.d[i] + u * (hi.d[i] - lo.d[i])) / width),
        }
    };
    let first = grid.bin_of(lo.v);
    let last = grid.bin_of(hi.v);
    let mut below = cdf(grid.edges[first]);
    for (k, slot) in row.iter_mut().enumerate().take(last + 1).skip(first) {
        let above = cdf(grid.edges[k + 1]);
        let frac = Dual {
            v: above.v - below.v,
            d: std::array::from_fn(|i| above.d[i] - below.d[i]),
        };
        if frac.v > 0.0 {
            slot.add_assign(weight.mul(frac));
        }
        below = above;
    }
}

/// Operators for one box, before diffusion, with local derivatives.
struct RawBox {
    /// [opened][key] -> N x N rows of P(b' | b, key), not yet diffused
    cond: [Vec<Vec<Vec<Dual>>>; 2],
    /// [opened][key] -> N values of P(key | b)
    obs: [Vec<Vec<Dual>>; 2],
}

fn build_raw_box(kernel: &BoxKernel, grid: &BeliefGrid, n_colors: usize) -> RawBox {
    let n = grid.n_bins;
    let m = grid.quadrature;
    let sub = grid.width() / m as f64;
    let inv_m = 1.0 / m as f64;
    let keys: Vec<Option<usize>> = (0..n_colors).map(Some).chain([None]).collect();
    let mut cond: [Vec<Vec<Vec<Dual>>>; 2] = [Vec::new(), Vec::new()];
    let mut obs: [Vec<Vec<Dual>>; 2] = [Vec::new(), Vec::new()];
    for opened in [false, true] {
        for &key in &keys {
            let mut rows = vec![vec![Dual::default(); n]; n];
            let mut evidence = vec![Dual::default(); n];
            for (j, row) in rows.iter_mut().enumerate() {
                let mut weight_sum = Dual::default();
                for s in 0..m {
                    let x_lo = grid.edges[j] + s as f64 * sub;
                    let x_hi = if s + 1 == m { grid.edges[j + 1] } else { x_lo + sub };
                    let mid = kernel.eval(0.5 * (x_lo + x_hi), opened, key);
                    let weight = mid.like.scale(inv_m);
                    weight_sum.add_assign(weight);
                    if opened {
                        deposit_point(grid, mid.post, weight, row);
                    } else {
                        let a = kernel.eval(x_lo, opened, key).post;
                        let b = kernel.eval(x_hi, opened, key).post;
                        let (lo, hi) = if a.v <= b.v { (a, b) } else { (b, a) };
                        deposit_interval(grid, lo, hi, weight, row);
                    }
                }
                // Normalize the joint weights into P(b' | b, key).
                let z = weight_sum;
                for entry in row.iter_mut() {
                    let t = entry.v / z.v;
                    let mut d = [0.0; LOCAL];
                    for (i, x) in d.iter_mut().enumerate() {
                        *x = (entry.d[i] - t * z.d[i]) / z.v;
                    }
                    *entry = Dual { v: t, d };
                }
                evidence[j] = z;
            }
            cond[opened as usize].push(rows);
            obs[opened as usize].push(evidence);
        }
    }
    RawBox { cond, obs }
}

/// Tridiagonal diffusion kernel with reflecting boundaries.
pub fn diffusion_kernel(n: usize, lambda: f64) -> Array2<f64> {
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        let mut stay = 1.0;
        if i > 0 {
            k[[i, i - 1]] = lambda;
            stay -= lambda;
        }
        if i + 1 < n {
            k[[i, i + 1]] = lambda;
            stay -= lambda;
        }
        k[[i, i]] = stay;
    }
    k
}

/// d(kernel)/d(lambda).
fn diffusion_kernel_derivative(n: usize) -> Array2<f64> {
    diffusion_kernel(n, 1.0) - Array2::<f64>::eye(n)
}

/// Post-multiply a row-stochastic matrix by the diffusion kernel.
pub fn apply_diffusion(matrix: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if !(0.0..0.5).contains(&lambda) {
        return Err(IrcError::ParameterDomain {
            name: "diffusion",
            value: lambda,
            range: "[0, 0.5)",
        });
    }
    if lambda == 0.0 {
        return Ok(matrix.clone());
    }
    Ok(matrix.dot(&diffusion_kernel(matrix.ncols(), lambda)))
}

/// Per-box operators after diffusion.
#[derive(Debug, Clone)]
pub struct BoxOperators {
    /// `cond[opened][key]`: row-stochastic `P(b' | b, key)`. Key `n_colors`
    /// stands for "color not seen".
    pub cond: [Vec<Array2<f64>>; 2],
    /// `obs[opened][key]`: `P(key | b)` per source bin.
    pub obs: [Vec<Array1<f64>>; 2],
    /// `mean[opened][visible]`: `sum_key P(key | b) P(b' | b, key)`.
    pub mean: [[Array2<f64>; 2]; 2],
}

impl BoxOperators {
    fn from_parts(
        cond: [Vec<Array2<f64>>; 2],
        obs: [Vec<Array1<f64>>; 2],
        n_colors: usize,
    ) -> Self {
        let mean = [0, 1].map(|opened| {
            let seen = (0..n_colors).fold(
                Array2::zeros(cond[opened][0].raw_dim()),
                |acc: Array2<f64>, c| {
                    let weights = obs[opened][c].view().insert_axis(ndarray::Axis(1));
                    acc + &cond[opened][c] * &weights
                },
            );
            let unseen = cond[opened][n_colors].clone();
            [unseen, seen]
        });
        BoxOperators { cond, obs, mean }
    }

    /// Marginal operator for a box given the action's effect on it.
    pub fn marginal(&self, opened: bool, visible: bool) -> &Array2<f64> {
        &self.mean[opened as usize][visible as usize]
    }
}

/// Effect of an action on one box: whether it was opened, and whether its
/// next color will be seen.
pub fn box_effect(layout: &TaskLayout, location: Location, action: Action, box_index: usize) -> (bool, bool) {
    let opened = action.opens(location) == Some(box_index);
    let visible = layout.color_visible(box_index, action.next_location(location));
    (opened, visible)
}

/// Key index for a (possibly unseen) color.
pub fn obs_key(layout: &TaskLayout, color: Option<usize>) -> usize {
    color.unwrap_or(layout.n_colors)
}

/// All belief-transition operators for one agent model.
#[derive(Debug, Clone)]
pub struct BeliefTransitionSet {
    grid: BeliefGrid,
    layout: TaskLayout,
    boxes: [BoxOperators; 2],
}

/// Derivative of a [`BeliefTransitionSet`] with respect to one parameter.
/// Boxes the parameter does not touch are `None`.
#[derive(Debug, Clone)]
pub struct TransitionDerivative {
    pub boxes: [Option<BoxOperators>; 2],
}

impl TransitionDerivative {
    pub fn is_zero(&self) -> bool {
        self.boxes.iter().all(Option::is_none)
    }
}

/// Build every belief-transition operator for `model` on `grid`.
pub fn build_transition_set(
    model: &AgentModel,
    grid: &BeliefGrid,
    layout: &TaskLayout,
) -> Result<BeliefTransitionSet> {
    BeliefTransitionSet::build(model, grid, layout)
}

impl BeliefTransitionSet {
    pub fn build(model: &AgentModel, grid: &BeliefGrid, layout: &TaskLayout) -> Result<Self> {
        Ok(Self::build_with_derivatives(model, grid, layout, false)?.0)
    }

    /// Build the operators and, when `derivatives` is set, their derivatives
    /// for every parameter in [`Param::ALL`] order.
    pub fn build_with_derivatives(
        model: &AgentModel,
        grid: &BeliefGrid,
        layout: &TaskLayout,
        derivatives: bool,
    ) -> Result<(Self, Vec<TransitionDerivative>)> {
        if !(0.0..0.5).contains(&model.diffusion) {
            return Err(IrcError::ParameterDomain {
                name: "diffusion",
                value: model.diffusion,
                range: "[0, 0.5)",
            });
        }
        let n = grid.n_bins;
        let n_keys = layout.n_colors + 1;
        let kernel = diffusion_kernel(n, model.diffusion);
        let dkernel = diffusion_kernel_derivative(n);
        let raws: Vec<RawBox> = (0..2)
            .map(|i| build_raw_box(&BoxKernel::new(model, i, layout.n_colors), grid, layout.n_colors))
            .collect();

        let values = |raw: &RawBox| -> BoxOperators {
            let cond = [0, 1].map(|o| {
                (0..n_keys)
                    .map(|k| to_matrix(&raw.cond[o][k], |d| d.v).dot(&kernel))
                    .collect()
            });
            let obs = [0, 1].map(|o| {
                (0..n_keys)
                    .map(|k| raw.obs[o][k].iter().map(|d| d.v).collect())
                    .collect()
            });
            BoxOperators::from_parts(cond, obs, layout.n_colors)
        };
        let boxes = [values(&raws[0]), values(&raws[1])];
        let set = BeliefTransitionSet {
            grid: grid.clone(),
            layout: *layout,
            boxes,
        };
        if !derivatives {
            return Ok((set, Vec::new()));
        }

        let local = |raw: &RawBox, base: &BoxOperators, i: usize| -> BoxOperators {
            let cond = [0, 1].map(|o| {
                (0..n_keys)
                    .map(|k| to_matrix(&raw.cond[o][k], |d| d.d[i]).dot(&kernel))
                    .collect()
            });
            let obs = [0, 1].map(|o| {
                (0..n_keys)
                    .map(|k| raw.obs[o][k].iter().map(|d| d.d[i]).collect())
                    .collect()
            });
            derivative_parts(base, cond, obs, layout.n_colors)
        };
        let diffusion = |raw: &RawBox, base: &BoxOperators| -> BoxOperators {
            let cond = [0, 1].map(|o| {
                (0..n_keys)
                    .map(|k| to_matrix(&raw.cond[o][k], |d| d.v).dot(&dkernel))
                    .collect()
            });
            let obs = [0, 1].map(|_| (0..n_keys).map(|_| Array1::zeros(n)).collect());
            derivative_parts(base, cond, obs, layout.n_colors)
        };

        let derivs = Param::ALL
            .iter()
            .map(|&p| {
                let boxes = match p {
                    Param::Appear1 => [Some(local(&raws[0], &set.boxes[0], 0)), None],
                    Param::Disappear1 => [Some(local(&raws[0], &set.boxes[0], 1)), None],
                    Param::Appear2 => [None, Some(local(&raws[1], &set.boxes[1], 0))],
                    Param::Disappear2 => [None, Some(local(&raws[1], &set.boxes[1], 1))],
                    Param::QAbsent => [
                        Some(local(&raws[0], &set.boxes[0], 2)),
                        Some(local(&raws[1], &set.boxes[1], 2)),
                    ],
                    Param::QPresent => [
                        Some(local(&raws[0], &set.boxes[0], 3)),
                        Some(local(&raws[1], &set.boxes[1], 3)),
                    ],
                    Param::Diffusion => [
                        Some(diffusion(&raws[0], &set.boxes[0])),
                        Some(diffusion(&raws[1], &set.boxes[1])),
                    ],
                    _ => [None, None],
                };
                TransitionDerivative { boxes }
            })
            .collect();
        Ok((set, derivs))
    }

    pub fn grid(&self) -> &BeliefGrid {
        &self.grid
    }

    pub fn layout(&self) -> &TaskLayout {
        &self.layout
    }

    pub fn box_operators(&self, box_index: usize) -> &BoxOperators {
        &self.boxes[box_index]
    }

    /// Per-box conditional operator for a logged step.
    pub fn box_conditional(&self, box_index: usize, opened: bool, color: Option<usize>) -> &Array2<f64> {
        &self.boxes[box_index].cond[opened as usize][obs_key(&self.layout, color)]
    }

    fn check_observation(&self, location: Location, action: Action, colors: [Option<usize>; 2]) -> Result<()> {
        for (i, color) in colors.iter().enumerate() {
            let (_, visible) = box_effect(&self.layout, location, action, i);
            match color {
                Some(c) if *c >= self.layout.n_colors => {
                    return Err(IrcError::Domain(format!("color {c} out of range")))
                }
                Some(_) if !visible => {
                    return Err(IrcError::Domain(format!("box {} is not visible after {action}", i + 1)))
                }
                None if visible => {
                    return Err(IrcError::Domain(format!("box {} color missing", i + 1)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Joint `P(b' | b, action, colors)` over `N * N` bins.
    pub fn joint_conditional(
        &self,
        location: Location,
        action: Action,
        colors: [Option<usize>; 2],
    ) -> Result<Array2<f64>> {
        self.check_observation(location, action, colors)?;
        let (o1, _) = box_effect(&self.layout, location, action, 0);
        let (o2, _) = box_effect(&self.layout, location, action, 1);
        Ok(kron(
            self.box_conditional(0, o1, colors[0]),
            self.box_conditional(1, o2, colors[1]),
        ))
    }

    /// Joint `P(colors | b, action)` over `N * N` bins.
    pub fn joint_obs_prob(
        &self,
        location: Location,
        action: Action,
        colors: [Option<usize>; 2],
    ) -> Result<Array1<f64>> {
        self.check_observation(location, action, colors)?;
        let n = self.grid.n_bins;
        let mut out = Array1::zeros(n * n);
        let (o1, _) = box_effect(&self.layout, location, action, 0);
        let (o2, _) = box_effect(&self.layout, location, action, 1);
        let p1 = &self.boxes[0].obs[o1 as usize][obs_key(&self.layout, colors[0])];
        let p2 = &self.boxes[1].obs[o2 as usize][obs_key(&self.layout, colors[1])];
        for j1 in 0..n {
            for j2 in 0..n {
                out[j1 * n + j2] = p1[j1] * p2[j2];
            }
        }
        Ok(out)
    }

    /// Every joint observation consistent with visibility after `action`.
    pub fn observations(&self, location: Location, action: Action) -> Vec<[Option<usize>; 2]> {
        let per_box: Vec<Vec<Option<usize>>> = (0..2)
            .map(|i| {
                if box_effect(&self.layout, location, action, i).1 {
                    (0..self.layout.n_colors).map(Some).collect()
                } else {
                    vec![None]
                }
            })
            .collect();
        let mut out = Vec::new();
        for &a in &per_box[0] {
            for &b in &per_box[1] {
                out.push([a, b]);
            }
        }
        out
    }

    /// Sparse CSV dump of the joint conditional operators:
    /// `location,action,o1,o2,from_bin,to_bin,prob` with `-1` for an unseen color.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "location,action,o1,o2,from_bin,to_bin,prob")?;
        for loc in Location::ALL {
            for action in Action::ALL {
                for colors in self.observations(loc, action) {
                    let m = self.joint_conditional(loc, action, colors)?;
                    let c = colors.map(|c| c.map_or(-1, |c| c as i64));
                    for ((from, to), &p) in m.indexed_iter() {
                        if p > 0.0 {
                            writeln!(
                                out,
                                "{},{},{},{},{},{},{}",
                                loc.index(),
                                action.index(),
                                c[0],
                                c[1],
                                from,
                                to,
                                p
                            )?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn derivative_parts(
    base: &BoxOperators,
    dcond: [Vec<Array2<f64>>; 2],
    dobs: [Vec<Array1<f64>>; 2],
    n_colors: usize,
) -> BoxOperators {
    let mean = [0, 1].map(|o| {
        let seen = (0..n_colors).fold(Array2::zeros(base.cond[o][0].raw_dim()), |acc: Array2<f64>, c| {
            let w = base.obs[o][c].view().insert_axis(ndarray::Axis(1));
            let dw = dobs[o][c].view().insert_axis(ndarray::Axis(1));
            acc + &dcond[o][c] * &w + &base.cond[o][c] * &dw
        });
        [dcond[o][n_colors].clone(), seen]
    });
    BoxOperators {
        cond: dcond,
        obs: dobs,
        mean,
    }
}

fn to_matrix(rows: &[Vec<Dual>], f: impl Fn(&Dual) -> f64) -> Array2<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((n, m), |(i, j)| f(&rows[i][j]))
}

/// Kronecker product, row index `i * b.nrows() + k`.
pub fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(r, c)| a[[r / br, c / bc]] * b[[r % br, c % bc]])
}
