//! The fusion pipeline: offset prediction, adaptive sampling, 2D/3D feature
//! fusion, the hand-derived backward pass, a finite-difference gradient
//! check, and a toy shift-recovery training loop.

use rayon::prelude::*;

use super::network::{OffsetNetwork, TwoDLearner, OFFSET_HIDDEN_ACT};
use super::sampler::{locate, sample_channels, sample_coord_grad, scatter_value_grad, SampleNode};
use super::{FeatureGrid, FusionError, PointFeatureSet};
use crate::rng::StreamRng;

/// 3x3 neighborhood offsets used to build the offset-network input context.
const NEIGHBORHOOD: [(f64, f64); 9] = [
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (-1.0, 0.0),
    (0.0, 0.0),
    (1.0, 0.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
];

/// Everything recorded about one point during the adaptive-sampling forward
/// pass; exactly what the chain rule needs on the way back.
#[derive(Debug, Clone)]
struct PointTrace {
    input: Vec<f64>,
    ref_node: SampleNode,
    nbr_nodes: [SampleNode; 9],
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    logits: [f64; 2],
    sample_node: SampleNode,
    sampled: Vec<f64>,
}

fn check_net_grid(net: &OffsetNetwork, grid: &FeatureGrid) -> Result<(), FusionError> {
    if net.input_dim() != 2 * grid.channels() as usize {
        return Err(FusionError::ShapeMismatch(format!(
            "offset network expects {} inputs but grid with {} channels provides {}",
            net.input_dim(),
            grid.channels(),
            2 * grid.channels()
        )));
    }
    Ok(())
}

/// Assemble the offset-network input for one reference point: the feature at
/// the reference pixel concatenated with the mean feature over its 3x3
/// pixel neighborhood.
fn offset_input(
    grid: &FeatureGrid,
    rf: (f64, f64),
) -> (Vec<f64>, SampleNode, [SampleNode; 9]) {
    let d = grid.channels() as usize;
    let ref_node = locate(grid.width(), grid.height(), rf.0, rf.1);
    let mut input = Vec::with_capacity(2 * d);
    sample_channels(grid, &ref_node, &mut input);
    let mut nbr_nodes = [ref_node; 9];
    let mut mean = vec![0.0; d];
    let mut scratch = Vec::with_capacity(d);
    for (j, (dx, dy)) in NEIGHBORHOOD.iter().enumerate() {
        let node = locate(grid.width(), grid.height(), rf.0 + dx, rf.1 + dy);
        nbr_nodes[j] = node;
        scratch.clear();
        sample_channels(grid, &node, &mut scratch);
        for (m, v) in mean.iter_mut().zip(&scratch) {
            *m += v / 9.0;
        }
    }
    input.extend_from_slice(&mean);
    (input, ref_node, nbr_nodes)
}

fn trace_point(grid: &FeatureGrid, net: &OffsetNetwork, rf: (f64, f64)) -> PointTrace {
    let (input, ref_node, nbr_nodes) = offset_input(grid, rf);
    let (hidden_pre, hidden_act, logits, offset) = net.forward_traced(&input);
    let pos = (rf.0 + offset.0, rf.1 + offset.1);
    let sample_node = locate(grid.width(), grid.height(), pos.0, pos.1);
    let mut sampled = Vec::with_capacity(grid.channels() as usize);
    sample_channels(grid, &sample_node, &mut sampled);
    PointTrace {
        input,
        ref_node,
        nbr_nodes,
        hidden_pre,
        hidden_act,
        logits,
        sample_node,
        sampled,
    }
}

fn adaptive_forward(
    grid: &FeatureGrid,
    net: &OffsetNetwork,
    refs: &[(f64, f64)],
) -> Result<Vec<PointTrace>, FusionError> {
    check_net_grid(net, grid)?;
    Ok(refs
        .par_iter()
        .map(|&rf| trace_point(grid, net, rf))
        .collect())
}

/// Gradients for every learnable quantity, plus the feature grid itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub net_w1: Vec<f64>,
    pub net_b1: Vec<f64>,
    pub net_w2: Vec<f64>,
    pub net_b2: Vec<f64>,
    pub learner_w: Vec<f64>,
    pub learner_b: Vec<f64>,
    pub grid: Vec<f64>,
}

impl Gradients {
    fn zeros(net: &OffsetNetwork, learner: &TwoDLearner, grid_len: usize) -> Self {
        Gradients {
            net_w1: vec![0.0; net.layer1.weight.len()],
            net_b1: vec![0.0; net.layer1.bias.len()],
            net_w2: vec![0.0; net.layer2.weight.len()],
            net_b2: vec![0.0; net.layer2.bias.len()],
            learner_w: vec![0.0; learner.layer.weight.len()],
            learner_b: vec![0.0; learner.layer.bias.len()],
            grid: vec![0.0; grid_len],
        }
    }
}

/// Chain rule for the adaptive-sampling path of one point. `upstream` is the
/// loss gradient at the sampled (2D-side) features.
///
/// The grid receives gradient through two routes: the four corners of the
/// displaced sample, and the offset-network input (reference + neighborhood
/// samples), whose influence flows through the predicted offset.
fn backprop_adaptive_point(
    trace: &PointTrace,
    grid: &FeatureGrid,
    net: &OffsetNetwork,
    upstream: &[f64],
    grads: &mut Gradients,
) {
    let d = grid.channels() as usize;
    let hidden = net.hidden_dim();
    let input_dim = net.input_dim();

    // Sampled features: value route to the grid corners, coordinate route to
    // the offsets.
    let (mut ds_x, mut ds_y) = (0.0, 0.0);
    for c in 0..d {
        let g = upstream[c];
        scatter_value_grad(&mut grads.grid, grid, &trace.sample_node, c as u32, g);
        let (dx, dy) = sample_coord_grad(grid, &trace.sample_node, c as u32);
        ds_x += g * dx;
        ds_y += g * dy;
    }

    // Offset = saturate(logits); position = ref + offset.
    let mut d_logits = [0.0; 2];
    for (i, ds) in [ds_x, ds_y].into_iter().enumerate() {
        d_logits[i] = ds * net.saturate_grad(trace.logits[i]);
    }

    // Layer 2.
    let mut d_hidden_act = vec![0.0; hidden];
    for i in 0..2 {
        grads.net_b2[i] += d_logits[i];
        for j in 0..hidden {
            grads.net_w2[i * hidden + j] += d_logits[i] * trace.hidden_act[j];
            d_hidden_act[j] += net.layer2.weight[i * hidden + j] * d_logits[i];
        }
    }

    // Hidden activation, layer 1.
    let mut d_input = vec![0.0; input_dim];
    for j in 0..hidden {
        let dh = d_hidden_act[j] * OFFSET_HIDDEN_ACT.grad(trace.hidden_pre[j]);
        grads.net_b1[j] += dh;
        for k in 0..input_dim {
            grads.net_w1[j * input_dim + k] += dh * trace.input[k];
            d_input[k] += net.layer1.weight[j * input_dim + k] * dh;
        }
    }

    // Offset-network input back to the grid: reference sample plus the 3x3
    // neighborhood mean.
    for c in 0..d {
        scatter_value_grad(&mut grads.grid, grid, &trace.ref_node, c as u32, d_input[c]);
    }
    for node in &trace.nbr_nodes {
        for c in 0..d {
            scatter_value_grad(
                &mut grads.grid,
                grid,
                node,
                c as u32,
                d_input[d + c] / 9.0,
            );
        }
    }
}

/// Predict one bounded `(dx, dy)` offset per reference point from the image
/// features around it.
pub fn predict_offsets(
    net: &OffsetNetwork,
    grid: &FeatureGrid,
    refs: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>, FusionError> {
    check_net_grid(net, grid)?;
    Ok(refs
        .par_iter()
        .map(|&rf| {
            let (input, _, _) = offset_input(grid, rf);
            net.forward_traced(&input).3
        })
        .collect())
}

/// 4-neighbor bilinear interpolation of all grid channels at each coordinate.
pub fn bilinear_sample(grid: &FeatureGrid, coords: &[(f64, f64)]) -> PointFeatureSet {
    let d = grid.channels() as usize;
    let mut values = Vec::with_capacity(coords.len() * d);
    for &(x, y) in coords {
        let node = locate(grid.width(), grid.height(), x, y);
        sample_channels(grid, &node, &mut values);
    }
    PointFeatureSet {
        channels: grid.channels(),
        coords: coords.to_vec(),
        values,
    }
}

/// Sample the grid at `refs + predicted offsets`: the adaptive replacement
/// for features sampled at the raw projection coordinates.
pub fn sample_adaptive(
    grid: &FeatureGrid,
    net: &OffsetNetwork,
    refs: &[(f64, f64)],
) -> Result<PointFeatureSet, FusionError> {
    let traces = adaptive_forward(grid, net, refs)?;
    let d = grid.channels() as usize;
    let mut values = Vec::with_capacity(refs.len() * d);
    for t in &traces {
        values.extend_from_slice(&t.sampled);
    }
    Ok(PointFeatureSet {
        channels: grid.channels(),
        coords: refs.to_vec(),
        values,
    })
}

/// Concatenate image features with learner-transformed point features:
/// channels `[0, D)` are the 2D input verbatim, `[D, 2D)` the learned map of
/// the 3D input.
pub fn fuse(
    point_feats: &PointFeatureSet,
    image_feats: &PointFeatureSet,
    learner: &TwoDLearner,
) -> Result<PointFeatureSet, FusionError> {
    if point_feats.channels != image_feats.channels {
        return Err(FusionError::ShapeMismatch(format!(
            "point features have {} channels, image features {}",
            point_feats.channels, image_feats.channels
        )));
    }
    if point_feats.count() != image_feats.count() {
        return Err(FusionError::ShapeMismatch(format!(
            "point count {} != image point count {}",
            point_feats.count(),
            image_feats.count()
        )));
    }
    if learner.channels() != point_feats.channels {
        return Err(FusionError::ShapeMismatch(format!(
            "learner maps {} channels, features have {}",
            learner.channels(),
            point_feats.channels
        )));
    }
    let d = point_feats.channels as usize;
    let n = point_feats.count();
    let mut values = Vec::with_capacity(n * 2 * d);
    let mut pre = Vec::with_capacity(d);
    for i in 0..n {
        values.extend_from_slice(image_feats.point(i));
        pre.clear();
        learner.layer.forward(point_feats.point(i), &mut pre);
        values.extend(pre.iter().map(|&v| learner.activation.eval(v)));
    }
    Ok(PointFeatureSet {
        channels: 2 * point_feats.channels,
        coords: image_feats.coords.clone(),
        values,
    })
}

struct ForwardState {
    refs: Vec<(f64, f64)>,
    point_values: Vec<f64>,
    traces: Vec<PointTrace>,
    learner_pre: Vec<f64>,
    grid_shape: (u32, u32, u32),
}

/// The full fusion pipeline with recorded state, so a backward pass can
/// follow a forward pass.
pub struct DeformableFusion {
    pub net: OffsetNetwork,
    pub learner: TwoDLearner,
    state: Option<ForwardState>,
}

impl DeformableFusion {
    pub fn new(net: OffsetNetwork, learner: TwoDLearner) -> Self {
        DeformableFusion {
            net,
            learner,
            state: None,
        }
    }

    /// Adaptive sampling of the 2D side followed by fusion with the 3D side.
    /// Records intermediates for `backward`.
    pub fn forward(
        &mut self,
        grid: &FeatureGrid,
        refs: &[(f64, f64)],
        point_feats: &PointFeatureSet,
    ) -> Result<PointFeatureSet, FusionError> {
        if point_feats.channels != grid.channels() {
            return Err(FusionError::ShapeMismatch(format!(
                "point features have {} channels, grid {}",
                point_feats.channels,
                grid.channels()
            )));
        }
        if point_feats.count() != refs.len() {
            return Err(FusionError::ShapeMismatch(format!(
                "{} reference points but {} feature rows",
                refs.len(),
                point_feats.count()
            )));
        }
        if self.learner.channels() != grid.channels() {
            return Err(FusionError::ShapeMismatch(format!(
                "learner maps {} channels, grid has {}",
                self.learner.channels(),
                grid.channels()
            )));
        }
        let traces = adaptive_forward(grid, &self.net, refs)?;
        let d = grid.channels() as usize;
        let n = refs.len();
        let mut learner_pre = Vec::with_capacity(n * d);
        let mut values = Vec::with_capacity(n * 2 * d);
        for (i, t) in traces.iter().enumerate() {
            values.extend_from_slice(&t.sampled);
            let start = learner_pre.len();
            self.learner
                .layer
                .forward(point_feats.point(i), &mut learner_pre);
            values.extend(
                learner_pre[start..]
                    .iter()
                    .map(|&v| self.learner.activation.eval(v)),
            );
        }
        let fused = PointFeatureSet {
            channels: 2 * grid.channels(),
            coords: refs.to_vec(),
            values,
        };
        self.state = Some(ForwardState {
            refs: refs.to_vec(),
            point_values: point_feats.values.clone(),
            traces,
            learner_pre,
            grid_shape: (grid.height(), grid.width(), grid.channels()),
        });
        Ok(fused)
    }

    /// Analytic gradients of a scalar loss with gradient `upstream` at the
    /// fused outputs (`N x 2D`, row-major), for all offset-network weights,
    /// learner weights, and grid values.
    pub fn backward(
        &self,
        grid: &FeatureGrid,
        upstream: &[f64],
    ) -> Result<Gradients, FusionError> {
        let state = self.state.as_ref().ok_or(FusionError::NoForwardState)?;
        if state.grid_shape != (grid.height(), grid.width(), grid.channels()) {
            return Err(FusionError::ShapeMismatch(
                "grid shape differs from the recorded forward pass".into(),
            ));
        }
        let d = grid.channels() as usize;
        let n = state.refs.len();
        if upstream.len() != n * 2 * d {
            return Err(FusionError::ShapeMismatch(format!(
                "upstream gradient needs {} values, got {}",
                n * 2 * d,
                upstream.len()
            )));
        }
        let mut grads = Gradients::zeros(&self.net, &self.learner, grid.values().len());
        // Accumulate in point order so results are independent of thread
        // count and identical across runs.
        for i in 0..n {
            let up = &upstream[i * 2 * d..(i + 1) * 2 * d];
            backprop_adaptive_point(&state.traces[i], grid, &self.net, &up[..d], &mut grads);
            let point = &state.point_values[i * d..(i + 1) * d];
            let pre = &state.learner_pre[i * d..(i + 1) * d];
            for r in 0..d {
                let dpre = up[d + r] * self.learner.activation.grad(pre[r]);
                grads.learner_b[r] += dpre;
                for c in 0..d {
                    grads.learner_w[r * d + c] += dpre * point[c];
                }
            }
        }
        Ok(grads)
    }
}

/// Outcome of the finite-difference verification of `backward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub instances: usize,
    pub params_checked: usize,
}

fn loss_of(
    grid: &FeatureGrid,
    net: &OffsetNetwork,
    learner: &TwoDLearner,
    refs: &[(f64, f64)],
    point_feats: &PointFeatureSet,
    coeffs: &[f64],
) -> f64 {
    let mut pipeline = DeformableFusion::new(net.clone(), learner.clone());
    let fused = pipeline.forward(grid, refs, point_feats).expect("shapes fixed");
    fused.values.iter().zip(coeffs).map(|(v, c)| v * c).sum()
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely against finite-difference noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare every analytic gradient against central finite differences on
/// seeded random instances. Instances whose sample positions fall within
/// 1e-3 of a lattice line (where the bilinear derivative is one-sided) are
/// deterministically re-drawn.
pub fn gradcheck(instances: usize, h: f64, seed: u64) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut params_checked = 0usize;
    let mut produced = 0usize;
    let mut attempt = 0u64;
    while produced < instances {
        let inst_seed = seed
            .wrapping_add(1 + produced as u64)
            .wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        attempt += 1;
        let (w, hgt, d, n_pts) = (6u32, 6u32, 3u32, 8usize);
        let grid = FeatureGrid::smooth_random(hgt, w, d, inst_seed);
        let net = OffsetNetwork::seeded(d, 8, 1.0, inst_seed ^ 0xA5A5);
        let learner = TwoDLearner::seeded(d, inst_seed ^ 0x5A5A, super::Activation::Tanh);
        let rng = StreamRng::new(inst_seed, "gradcheck-data");
        let refs: Vec<(f64, f64)> = (0..n_pts as u64)
            .map(|i| {
                let cell_x = 1 + (rng.u64_at(4 * i) % (w as u64 - 3));
                let cell_y = 1 + (rng.u64_at(4 * i + 1) % (hgt as u64 - 3));
                (
                    cell_x as f64 + 0.1 + 0.8 * rng.uniform_at(4 * i + 2),
                    cell_y as f64 + 0.1 + 0.8 * rng.uniform_at(4 * i + 3),
                )
            })
            .collect();
        let point_values: Vec<f64> = (0..n_pts * d as usize)
            .map(|i| rng.uniform_in_at(1000 + i as u64, -1.0, 1.0))
            .collect();
        let point_feats =
            PointFeatureSet::new(d, refs.clone(), point_values).expect("finite by construction");
        let coeffs: Vec<f64> = (0..n_pts * 2 * d as usize)
            .map(|i| rng.uniform_in_at(5000 + i as u64, -1.0, 1.0))
            .collect();

        // Skip instances that land too close to the sampler's kinks.
        let offsets = predict_offsets(&net, &grid, &refs).expect("shapes fixed");
        let near_kink = |x: f64, max: f64| {
            let f = x.fract().abs();
            x < 1e-3 || x > max - 1e-3 || f < 1e-3 || f > 1.0 - 1e-3
        };
        let bad = refs.iter().zip(&offsets).any(|(rf, off)| {
            let (sx, sy) = (rf.0 + off.0, rf.1 + off.1);
            near_kink(sx, (w - 1) as f64) || near_kink(sy, (hgt - 1) as f64)
        });
        if bad {
            continue;
        }
        produced += 1;

        let mut pipeline = DeformableFusion::new(net.clone(), learner.clone());
        pipeline
            .forward(&grid, &refs, &point_feats)
            .expect("shapes fixed");
        let analytic = pipeline.backward(&grid, &coeffs).expect("state recorded");

        let mut check = |set: &mut dyn FnMut(f64) -> f64, at: f64, analytic_g: f64| {
            let lp = set(at + h);
            let lm = set(at - h);
            set(at); // restore
            let numeric = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic_g, numeric));
            params_checked += 1;
        };

        macro_rules! check_tensor {
            ($get:expr, $grad:expr) => {{
                let len = $grad.len();
                for idx in 0..len {
                    let mut net = net.clone();
                    let mut learner = learner.clone();
                    let mut grid = grid.clone();
                    let original = $get(&mut net, &mut learner, &mut grid, idx, None);
                    let mut set = |v: f64| {
                        $get(&mut net, &mut learner, &mut grid, idx, Some(v));
                        loss_of(&grid, &net, &learner, &refs, &point_feats, &coeffs)
                    };
                    check(&mut set, original, $grad[idx]);
                }
            }};
        }

        fn slot(
            target: &mut Vec<f64>,
            idx: usize,
            v: Option<f64>,
        ) -> f64 {
            if let Some(v) = v {
                target[idx] = v;
            }
            target[idx]
        }

        check_tensor!(
            |n: &mut OffsetNetwork, _l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut n.layer1.weight,
                i,
                v
            ),
            analytic.net_w1
        );
        check_tensor!(
            |n: &mut OffsetNetwork, _l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut n.layer1.bias,
                i,
                v
            ),
            analytic.net_b1
        );
        check_tensor!(
            |n: &mut OffsetNetwork, _l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut n.layer2.weight,
                i,
                v
            ),
            analytic.net_w2
        );
        check_tensor!(
            |n: &mut OffsetNetwork, _l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut n.layer2.bias,
                i,
                v
            ),
            analytic.net_b2
        );
        check_tensor!(
            |_n: &mut OffsetNetwork, l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut l.layer.weight,
                i,
                v
            ),
            analytic.learner_w
        );
        check_tensor!(
            |_n: &mut OffsetNetwork, l: &mut TwoDLearner, _g: &mut FeatureGrid, i, v| slot(
                &mut l.layer.bias,
                i,
                v
            ),
            analytic.learner_b
        );
        check_tensor!(
            |_n: &mut OffsetNetwork, _l: &mut TwoDLearner, g: &mut FeatureGrid, i, v| {
                if let Some(v) = v {
                    g.values_mut()[i] = v;
                }
                g.values()[i]
            },
            analytic.grid
        );
    }
    GradCheckReport {
        max_rel_err: max_rel,
        instances,
        params_checked,
    }
}

/// Result of the toy shift-recovery training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub net: OffsetNetwork,
    /// Loss before each step, plus the final loss (`steps + 1` entries).
    pub losses: Vec<f64>,
    /// Mean predicted offset over the training references after the last step.
    pub mean_offset: (f64, f64),
}

/// Train the offset network to recover a constant shift: full-batch gradient
/// descent on the MSE between adaptive samples at interior lattice references
/// and the analytically shifted grid evaluated at the same references
/// (`target(r) = grid(r + shift)`).
pub fn train_toy(
    grid: &FeatureGrid,
    true_shift: (f64, f64),
    steps: usize,
    learning_rate: f64,
    mut net: OffsetNetwork,
) -> Result<TrainResult, FusionError> {
    check_net_grid(&net, grid)?;
    if true_shift.0.abs() > net.max_offset || true_shift.1.abs() > net.max_offset {
        return Err(FusionError::InvalidArgument(format!(
            "true shift {true_shift:?} exceeds max_offset {}",
            net.max_offset
        )));
    }
    let lo = grid.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(FusionError::InvalidArgument(
            "grid must have spatial variation".into(),
        ));
    }
    let margin = net.max_offset.ceil() as u32 + 2;
    if 2 * margin >= grid.width() || 2 * margin >= grid.height() {
        return Err(FusionError::InvalidArgument(format!(
            "grid {}x{} too small for max_offset {} (margin {margin})",
            grid.width(),
            grid.height(),
            net.max_offset
        )));
    }
    // Half-pixel reference spacing: denser sampling of the wave phases keeps
    // the mean loss landscape over a constant offset free of spurious minima.
    let mut refs = Vec::new();
    let mut y = margin as f64;
    while y <= (grid.height() - 1 - margin) as f64 {
        let mut x = margin as f64;
        while x <= (grid.width() - 1 - margin) as f64 {
            refs.push((x, y));
            x += 0.5;
        }
        y += 0.5;
    }
    let shifted_coords: Vec<(f64, f64)> = refs
        .iter()
        .map(|r| (r.0 + true_shift.0, r.1 + true_shift.1))
        .collect();
    let targets = bilinear_sample(grid, &shifted_coords).values;

    let d = grid.channels() as usize;
    let n_total = targets.len() as f64;
    let dummy_learner = TwoDLearner::identity(grid.channels());
    let mut losses = Vec::with_capacity(steps + 1);

    let loss_and_upstream = |net: &OffsetNetwork| -> Result<(f64, Vec<PointTrace>, Vec<f64>), FusionError> {
        let traces = adaptive_forward(grid, net, &refs)?;
        let mut loss = 0.0;
        let mut upstream = vec![0.0; targets.len()];
        for (i, t) in traces.iter().enumerate() {
            for c in 0..d {
                let r = t.sampled[c] - targets[i * d + c];
                loss += r * r / n_total;
                upstream[i * d + c] = 2.0 * r / n_total;
            }
        }
        Ok((loss, traces, upstream))
    };

    for step in 0..steps {
        let (loss, traces, upstream) = loss_and_upstream(&net)?;
        if !loss.is_finite() {
            return Err(FusionError::DivergedLoss { step });
        }
        losses.push(loss);
        let mut grads = Gradients::zeros(&net, &dummy_learner, grid.values().len());
        for (i, t) in traces.iter().enumerate() {
            backprop_adaptive_point(t, grid, &net, &upstream[i * d..(i + 1) * d], &mut grads);
        }
        for (w, g) in net.layer1.weight.iter_mut().zip(&grads.net_w1) {
            *w -= learning_rate * g;
        }
        for (b, g) in net.layer1.bias.iter_mut().zip(&grads.net_b1) {
            *b -= learning_rate * g;
        }
        for (w, g) in net.layer2.weight.iter_mut().zip(&grads.net_w2) {
            *w -= learning_rate * g;
        }
        for (b, g) in net.layer2.bias.iter_mut().zip(&grads.net_b2) {
            *b -= learning_rate * g;
        }
        if !net.is_finite() {
            return Err(FusionError::DivergedLoss { step });
        }
    }
    let (final_loss, _, _) = loss_and_upstream(&net)?;
    if !final_loss.is_finite() {
        return Err(FusionError::DivergedLoss { step: steps });
    }
    losses.push(final_loss);

    let offsets = predict_offsets(&net, grid, &refs)?;
    let n = offsets.len() as f64;
    let mean_offset = (
        offsets.iter().map(|o| o.0).sum::<f64>() / n,
        offsets.iter().map(|o| o.1).sum::<f64>() / n,
    );
    Ok(TrainResult {
        net,
        losses,
        mean_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform_fusion::Activation;

    #[test]
    fn zero_weight_network_predicts_zero_offsets() {
        let grid = FeatureGrid::smooth_random(8, 8, 2, 1);
        let net = OffsetNetwork::zeros(2, 8, 5.0);
        let offsets = predict_offsets(&net, &grid, &[(2.0, 3.0), (4.5, 1.5)]).unwrap();
        assert_eq!(offsets, vec![(0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn zero_max_offset_saturates_everything_to_zero() {
        let grid = FeatureGrid::smooth_random(8, 8, 2, 2);
        let net = OffsetNetwork::seeded(2, 8, 0.0, 3);
        let offsets = predict_offsets(&net, &grid, &[(2.2, 3.3)]).unwrap();
        assert_eq!(offsets, vec![(0.0, 0.0)]);
    }

    #[test]
    fn offsets_always_bounded() {
        // 1e5 seeded draws of weights and query positions
        let grid = FeatureGrid::smooth_random(6, 6, 2, 4);
        let rng = StreamRng::new(11, "bound-test");
        let max_offset = 3.0;
        let mut checked = 0usize;
        for i in 0..10_000u64 {
            let net = OffsetNetwork::seeded(2, 4, max_offset, rng.u64_at(i));
            let refs: Vec<(f64, f64)> = (0..10)
                .map(|j| {
                    (
                        rng.uniform_in_at(100 * i + 2 * j, -2.0, 8.0),
                        rng.uniform_in_at(100 * i + 2 * j + 1, -2.0, 8.0),
                    )
                })
                .collect();
            for (dx, dy) in predict_offsets(&net, &grid, &refs).unwrap() {
                assert!(dx.abs() <= max_offset && dy.abs() <= max_offset);
                checked += 1;
            }
        }
        assert_eq!(checked, 100_000);
    }

    #[test]
    fn predict_offsets_matches_straight_line_oracle() {
        // Independent straight-line re-implementation of the forward pass.
        let grid = FeatureGrid::from_fn(4, 4, 2, |x, y, c| {
            (x as f64 * 1.5 - y as f64 * 0.7 + c as f64 * 0.3).sin()
        });
        let net = OffsetNetwork::seeded(2, 4, 3.0, 1);
        let rf = (1.5, 1.5);
        let got = predict_offsets(&net, &grid, &[rf]).unwrap()[0];

        // input: bilinear at (1.5, 1.5) per channel, then 3x3 neighborhood mean
        let bil = |x: f64, y: f64, c: u32| {
            let x0 = x.floor().clamp(0.0, 2.0);
            let y0 = y.floor().clamp(0.0, 2.0);
            let (tx, ty) = (x - x0, y - y0);
            let (xi, yi) = (x0 as u32, y0 as u32);
            grid.get(xi, yi, c) * (1.0 - tx) * (1.0 - ty)
                + grid.get(xi + 1, yi, c) * tx * (1.0 - ty)
                + grid.get(xi, yi + 1, c) * (1.0 - tx) * ty
                + grid.get(xi + 1, yi + 1, c) * tx * ty
        };
        let mut input = vec![bil(1.5, 1.5, 0), bil(1.5, 1.5, 1)];
        for c in 0..2 {
            let mut mean = 0.0;
            for dy in [-1.0, 0.0, 1.0] {
                for dx in [-1.0, 0.0, 1.0] {
                    mean += bil(1.5 + dx, 1.5 + dy, c) / 9.0;
                }
            }
            input.push(mean);
        }
        // two affine layers with softplus between, scaled tanh saturation after
        let mut h = vec![0.0; 4];
        for j in 0..4 {
            let mut acc = net.layer1.bias[j];
            for k in 0..4 {
                acc += net.layer1.weight[j * 4 + k] * input[k];
            }
            h[j] = (1.0 + acc.exp()).ln();
        }
        let mut o = [0.0; 2];
        for i in 0..2 {
            let mut acc = net.layer2.bias[i];
            for j in 0..4 {
                acc += net.layer2.weight[i * 4 + j] * h[j];
            }
            o[i] = 3.0 * (acc / 3.0).tanh();
        }
        assert!((got.0 - o[0]).abs() < 1e-12, "{got:?} vs {o:?}");
        assert!((got.1 - o[1]).abs() < 1e-12);
        // input ordering sanity: first two entries are the reference sample
        assert!((input[0] - bil(1.5, 1.5, 0)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_detected() {
        let grid = FeatureGrid::smooth_random(4, 4, 3, 5);
        let net = OffsetNetwork::zeros(2, 4, 1.0); // expects 2*2 inputs
        assert!(matches!(
            predict_offsets(&net, &grid, &[(1.0, 1.0)]),
            Err(FusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bilinear_affine_fields_reproduced_exactly() {
        let (a, b, c) = (0.7, -1.3, 2.1);
        let grid = FeatureGrid::from_fn(9, 7, 1, |x, y, _| a + b * x as f64 + c * y as f64);
        let rng = StreamRng::new(21, "affine");
        let coords: Vec<(f64, f64)> = (0..1000)
            .map(|i| {
                (
                    rng.uniform_in_at(2 * i, 0.0, 6.0),
                    rng.uniform_in_at(2 * i + 1, 0.0, 8.0),
                )
            })
            .collect();
        let out = bilinear_sample(&grid, &coords);
        for (i, &(x, y)) in coords.iter().enumerate() {
            let expected = a + b * x + c * y;
            assert!((out.values[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_with_zero_net_equals_plain_sampling_bitwise() {
        let grid = FeatureGrid::smooth_random(8, 8, 3, 6);
        let net = OffsetNetwork::zeros(3, 8, 2.0);
        let refs = vec![(1.25, 2.5), (0.0, 0.0), (6.9, 6.9), (-1.0, 9.5)];
        let adaptive = sample_adaptive(&grid, &net, &refs).unwrap();
        let plain = bilinear_sample(&grid, &refs);
        assert_eq!(adaptive.values, plain.values);
    }

    #[test]
    fn integer_shifted_grid_sampled_at_shifted_refs_matches_original() {
        // g2 holds g's content moved one pixel in +x: g2(x, y) = g(x-1, y).
        let g = FeatureGrid::smooth_random(8, 8, 2, 7);
        let g2 = FeatureGrid::from_fn(8, 8, 2, |x, y, c| {
            if x == 0 {
                0.0
            } else {
                g.get(x - 1, y, c)
            }
        });
        let rng = StreamRng::new(31, "shift");
        let refs: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                (
                    rng.uniform_in_at(2 * i, 0.0, 6.0),
                    rng.uniform_in_at(2 * i + 1, 0.0, 7.0),
                )
            })
            .collect();
        let shifted_refs: Vec<(f64, f64)> = refs.iter().map(|r| (r.0 + 1.0, r.1)).collect();
        let original = bilinear_sample(&g, &refs);
        let via_shifted = bilinear_sample(&g2, &shifted_refs);
        for (a, b) in original.values.iter().zip(&via_shifted.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn refs_at_lattice_points_with_zero_net_return_grid_values() {
        let grid = FeatureGrid::smooth_random(6, 6, 2, 8);
        let net = OffsetNetwork::zeros(2, 4, 1.0);
        let out = sample_adaptive(&grid, &net, &[(2.0, 3.0)]).unwrap();
        assert_eq!(out.values[0], grid.get(2, 3, 0));
        assert_eq!(out.values[1], grid.get(2, 3, 1));
    }

    #[test]
    fn fuse_identity_learner_concatenates_verbatim() {
        let image = PointFeatureSet::new(2, vec![(0.0, 0.0)], vec![1.0, 2.0]).unwrap();
        let point = PointFeatureSet::new(2, vec![(0.0, 0.0)], vec![3.0, 4.0]).unwrap();
        let fused = fuse(&point, &image, &TwoDLearner::identity(2)).unwrap();
        assert_eq!(fused.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fused.channels, 4);
    }

    #[test]
    fn fuse_zero_learner_hand_computed() {
        // zero weights with tanh(0) = 0 => (1, 2, 0, 0)
        let image = PointFeatureSet::new(2, vec![(0.0, 0.0)], vec![1.0, 2.0]).unwrap();
        let point = PointFeatureSet::new(2, vec![(0.0, 0.0)], vec![3.0, 4.0]).unwrap();
        let fused = fuse(&point, &image, &TwoDLearner::zeros(2, Activation::Tanh)).unwrap();
        assert_eq!(fused.values, vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_channel_slices_verified_independently() {
        let learner = TwoDLearner::seeded(3, 9, Activation::Tanh);
        let rng = StreamRng::new(41, "fuse-slices");
        let n = 5usize;
        let mk = |base: u64| -> PointFeatureSet {
            let values: Vec<f64> = (0..n * 3)
                .map(|i| rng.uniform_in_at(base + i as u64, -2.0, 2.0))
                .collect();
            PointFeatureSet::new(3, vec![(0.0, 0.0); n], values).unwrap()
        };
        let image = mk(0);
        let point = mk(1000);
        let fused = fuse(&point, &image, &learner).unwrap();
        for i in 0..n {
            // slice [0, D): image features verbatim
            assert_eq!(&fused.point(i)[..3], image.point(i));
            // slice [D, 2D): learner applied to the point features
            let mut pre = Vec::new();
            learner.layer.forward(point.point(i), &mut pre);
            for (k, p) in pre.iter().enumerate() {
                assert!((fused.point(i)[3 + k] - p.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_mismatched_channels_rejected() {
        let image = PointFeatureSet::new(2, vec![(0.0, 0.0)], vec![1.0, 2.0]).unwrap();
        let point = PointFeatureSet::new(3, vec![(0.0, 0.0)], vec![3.0, 4.0, 5.0]).unwrap();
        assert!(matches!(
            fuse(&point, &image, &TwoDLearner::identity(3)),
            Err(FusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_without_forward_errors() {
        let grid = FeatureGrid::smooth_random(4, 4, 2, 10);
        let pipeline = DeformableFusion::new(
            OffsetNetwork::zeros(2, 4, 1.0),
            TwoDLearner::identity(2),
        );
        assert!(matches!(
            pipeline.backward(&grid, &[0.0; 4]),
            Err(FusionError::NoForwardState)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let grid = FeatureGrid::smooth_random(6, 6, 2, 11);
        let refs = vec![(1.3, 2.6), (3.4, 1.2)];
        let feats = PointFeatureSet::new(2, refs.clone(), vec![0.5, -0.5, 1.0, 0.25]).unwrap();
        let mut pipeline = DeformableFusion::new(
            OffsetNetwork::seeded(2, 4, 1.0, 12),
            TwoDLearner::seeded(2, 13, Activation::Tanh),
        );
        pipeline.forward(&grid, &refs, &feats).unwrap();
        let grads = pipeline.backward(&grid, &vec![0.0; 8]).unwrap();
        assert!(grads.net_w1.iter().all(|&g| g == 0.0));
        assert!(grads.net_b2.iter().all(|&g| g == 0.0));
        assert!(grads.learner_w.iter().all(|&g| g == 0.0));
        assert!(grads.grid.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradcheck_passes_on_seeded_instances() {
        let report = gradcheck(5, 1e-5, 2024);
        assert!(report.params_checked > 500);
        assert!(
            report.max_rel_err < 1e-4,
            "max relative error {}",
            report.max_rel_err
        );
    }

    #[test]
    fn train_recovers_zero_shift_as_noop() {
        let grid = FeatureGrid::smooth_random(16, 16, 4, 3);
        let net = OffsetNetwork::zeros(4, 16, 4.0);
        let result = train_toy(&grid, (0.0, 0.0), 10, 0.05, net).unwrap();
        assert!(result.losses.iter().all(|&l| l == 0.0));
        assert_eq!(result.mean_offset, (0.0, 0.0));
    }

    #[test]
    fn train_recovers_constant_shift() {
        let grid = FeatureGrid::smooth_random(16, 16, 4, 2024);
        let net = OffsetNetwork::zeros(4, 16, 4.0);
        let result = train_toy(&grid, (1.5, -0.8), 500, 0.05, net).unwrap();
        let initial = result.losses[0];
        let final_loss = *result.losses.last().unwrap();
        assert!(
            final_loss < 0.1 * initial,
            "final {final_loss} vs initial {initial}"
        );
        let (mx, my) = result.mean_offset;
        let err = ((mx - 1.5).powi(2) + (my + 0.8).powi(2)).sqrt();
        assert!(err < 0.5, "mean offset ({mx}, {my}), error {err}");
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let grid = FeatureGrid::smooth_random(16, 16, 4, 2024);
        let net = OffsetNetwork::seeded(4, 16, 4.0, 1);
        match train_toy(&grid, (1.5, -0.8), 50, 1e6, net) {
            Err(FusionError::DivergedLoss { .. }) => {}
            other => panic!("expected DivergedLoss, got {other:?}"),
        }
    }

    #[test]
    fn train_shift_exceeding_bound_rejected() {
        let grid = FeatureGrid::smooth_random(16, 16, 2, 1);
        let net = OffsetNetwork::zeros(2, 4, 1.0);
        assert!(matches!(
            train_toy(&grid, (2.0, 0.0), 10, 0.05, net),
            Err(FusionError::InvalidArgument(_))
        ));
    }
}
