//! Central finite-difference checks of the analytic gradients.
//!
//! The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-3)`.
//! Coordinates where the two one-sided differences disagree sit on a kink
//! (ReLU switch, max-pool winner change, smooth-L1 knee) and are skipped:
//! no derivative exists there for either side to match.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gnn::{build_graph, GraphHeader, GraphUpdater, NeighborhoodGraph, UpdateMode, UpdaterShape, BOX_RESIDUALS};
use crate::nnet::{
    focal_loss_grad, offset_loss_grad, smooth_l1_grad, Activation, DenseStack, LossConfig, Parameters,
};
use crate::scene::Box3D;
use crate::train::{aux_loss, box_targets, detector_loss, refiner_loss, rpn_loss, AuxHeads, DetectorModel, Refiner, RpnHead, TrainingBatch};

pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_vector(name: &str, x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<GradReport> {
    let base = f(x)?;
    let mut probe = x.to_vec();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for k in 0..x.len() {
        probe[k] = x[k] + FD_STEP;
        let up = f(&probe)?;
        probe[k] = x[k] - FD_STEP;
        let down = f(&probe)?;
        probe[k] = x[k];
        let fwd = (up - base) / FD_STEP;
        let bwd = (base - down) / FD_STEP;
        if relative_error(fwd, bwd) > 1e-2 {
            skipped += 1;
            continue;
        }
        checked += 1;
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        skipped,
    })
}

/// Checks the parameter gradient `grads` of `loss` at `params`.
pub fn check_params<P: Parameters + Clone>(
    name: &str,
    params: &P,
    grads: &P,
    mut loss: impl FnMut(&P) -> Result<f64>,
) -> Result<GradReport> {
    let mut work = params.clone();
    check_vector(name, &params.to_flat(), &grads.to_flat(), |flat| {
        work.set_flat(flat)?;
        loss(&work)
    })
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random graph of `n` car proposals in a `spread x spread` square.
pub fn random_graph(rng: &mut impl Rng, n: usize, state_dim: usize, spread: f64, radius: f64) -> Result<(Vec<Box3D>, NeighborhoodGraph)> {
    let mut boxes = Vec::with_capacity(n);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let b = Box3D::new(
            [rng.random_range(0.0..spread), rng.random_range(0.0..spread), rng.random_range(-1.2..-0.8)],
            [rng.random_range(3.5..4.2), rng.random_range(1.4..1.8), rng.random_range(1.4..1.7)],
            rng.random_range(-3.0..3.0),
        )?;
        boxes.push(b);
        items.push((b, random_vec(rng, state_dim, 1.0)));
    }
    Ok((boxes, build_graph(&items, radius)?))
}

fn small_shape(mode: UpdateMode) -> UpdaterShape {
    UpdaterShape {
        mode,
        iterations: 3,
        aggregation_widths: vec![6, 5],
        fusion_hidden: vec![],
        alignment_hidden: vec![4],
    }
}

/// Runs every check for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cfg = LossConfig::default();

    // Dense stack under a random linear read-out.
    let stack = DenseStack::glorot(&[5, 7, 4], Activation::Relu, &mut rng)?;
    let x = random_vec(&mut rng, 5, 1.0);
    let c = random_vec(&mut rng, 4, 1.0);
    let readout = |s: &DenseStack| -> Result<f64> { Ok(s.forward(&x)?.iter().zip(&c).map(|(a, b)| a * b).sum()) };
    let (g, dx) = stack.backward(&stack.forward_trace(&x)?, &c)?;
    out.push(check_params("dense_stack.params", &stack, &g, readout)?);
    out.push(check_vector("dense_stack.input", &x, &dx, |v| {
        Ok(stack.forward(v)?.iter().zip(&c).map(|(a, b)| a * b).sum())
    })?);

    // Losses with respect to their predictions.
    let pred = random_vec(&mut rng, 6, 2.0);
    let target = random_vec(&mut rng, 6, 2.0);
    let (_, g) = smooth_l1_grad(&pred, &target, cfg.smooth_l1_beta)?;
    out.push(check_vector("smooth_l1", &pred, &g, |p| Ok(smooth_l1_grad(p, &target, cfg.smooth_l1_beta)?.0))?);

    let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
    let mask: Vec<bool> = (0..8).map(|i| i % 3 != 1).collect();
    for background in [false, true] {
        let fc = LossConfig {
            focal_background: background,
            ..cfg
        };
        let (_, g) = focal_loss_grad(&p, &mask, &fc)?;
        let name = if background { "focal.background" } else { "focal" };
        out.push(check_vector(name, &p, &g, |q| Ok(focal_loss_grad(q, &mask, &fc)?.0))?);
    }

    let op: Vec<f64> = random_vec(&mut rng, 12, 2.0);
    let ot: Vec<[f64; 3]> = (0..4).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.3]).collect();
    let om = vec![true, false, true, true];
    let as3 = |v: &[f64]| -> Vec<[f64; 3]> { v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let (_, g) = offset_loss_grad(&as3(&op), &ot, &om, cfg.smooth_l1_beta)?;
    let flat: Vec<f64> = g.iter().flatten().copied().collect();
    out.push(check_vector("offset_loss", &op, &flat, |v| {
        Ok(offset_loss_grad(&as3(v), &ot, &om, cfg.smooth_l1_beta)?.0)
    })?);

    // Graph updates with K = 3.
    let state_dim = 4;
    let (boxes, graph) = random_graph(&mut rng, 7, state_dim, 4.0, 2.5)?;
    for mode in [UpdateMode::Vanilla, UpdateMode::Extended] {
        let upd = GraphUpdater::new(&small_shape(mode), state_dim, &mut rng)?;
        let proj: Vec<Vec<f64>> = (0..graph.len()).map(|_| random_vec(&mut rng, state_dim, 1.0)).collect();
        let readout = |u: &GraphUpdater, g: &NeighborhoodGraph| -> Result<f64> {
            Ok(u.run(g)?
                .iter()
                .zip(&proj)
                .map(|(z, c)| z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                .sum())
        };
        let trace = upd.forward(&graph)?;
        let grads = upd.backward(&graph, &trace, &proj)?;
        let tag = match mode {
            UpdateMode::Vanilla => "update_vanilla",
            UpdateMode::Extended => "update_extended",
        };
        out.push(check_params(&format!("{tag}.params"), &upd, &grads.params, |u| readout(u, &graph))?);
        let states: Vec<f64> = graph.nodes().iter().flat_map(|n| n.state.clone()).collect();
        let d_states: Vec<f64> = grads.d_states.iter().flatten().copied().collect();
        let mut work = graph.clone();
        out.push(check_vector(&format!("{tag}.states"), &states, &d_states, |v| {
            for (i, chunk) in v.chunks(state_dim).enumerate() {
                work.set_state(i, chunk.to_vec())?;
            }
            readout(&upd, &work)
        })?);
        if mode == UpdateMode::Extended {
            let coords: Vec<f64> = graph.nodes().iter().flat_map(|n| n.coords).collect();
            let d_coords: Vec<f64> = grads.d_coords.iter().flatten().copied().collect();
            let mut work = graph.clone();
            out.push(check_vector(&format!("{tag}.coords"), &coords, &d_coords, |v| {
                for (i, chunk) in v.chunks(3).enumerate() {
                    work.set_coords(i, [chunk[0], chunk[1], chunk[2]]);
                }
                readout(&upd, &work)
            })?);
        }
    }

    // Graph header alone under a random read-out of logit and residuals.
    let header = GraphHeader::glorot(state_dim, 5, &mut rng)?;
    let z = random_vec(&mut rng, state_dim, 1.0);
    let c = random_vec(&mut rng, 1 + BOX_RESIDUALS, 1.0);
    let head_readout = |h: &GraphHeader, z: &[f64]| -> Result<f64> {
        let t = h.forward(z)?;
        Ok(c[0] * t.logit() + t.residuals().iter().zip(&c[1..]).map(|(a, b)| a * b).sum::<f64>())
    };
    let mut g_head = header.zeros_like();
    let d_res: [f64; BOX_RESIDUALS] = std::array::from_fn(|k| c[k + 1]);
    let dz = header.backward_into(&header.forward(&z)?, c[0], &d_res, &mut g_head)?;
    out.push(check_params("graph_header.params", &header, &g_head, |h| head_readout(h, &z))?);
    out.push(check_vector("graph_header.input", &z, &dz, |v| head_readout(&header, v))?);

    // Header composed with the extended update under the refinement loss.
    let refiner = Refiner {
        updater: GraphUpdater::new(&small_shape(UpdateMode::Extended), state_dim, &mut rng)?,
        header: GraphHeader::glorot(state_dim, 5, &mut rng)?,
    };
    let gts: Vec<Box3D> = boxes.iter().step_by(2).copied().collect();
    let targets = box_targets(&boxes, &gts, 0.3);
    let (_, grads) = refiner_loss(&refiner, &graph, &targets, &cfg)?;
    out.push(check_params("refiner.loss", &refiner, &grads, |r| Ok(refiner_loss(r, &graph, &targets, &cfg)?.0))?);

    // Composed detector: all four terms summed.
    let feat_dim = 5;
    let model = DetectorModel {
        rpn: RpnHead::glorot(feat_dim, 6, &mut rng)?,
        refiner: refiner.clone(),
        aux: AuxHeads::glorot(feat_dim, 6, &mut rng)?,
    };
    let anchors: Vec<Box3D> = boxes.iter().map(|b| Box3D::new(b.center, [3.9, 1.6, 1.56], 0.0)).collect::<Result<_>>()?;
    let batch = TrainingBatch {
        anchor_features: (0..anchors.len()).map(|_| random_vec(&mut rng, feat_dim, 1.0)).collect(),
        anchor_targets: box_targets(&anchors, &gts, 0.2),
        graph: graph.clone(),
        node_targets: targets.clone(),
        point_features: (0..10).map(|_| random_vec(&mut rng, feat_dim, 1.0)).collect(),
        point_foreground: (0..10).map(|i| i % 2 == 0).collect(),
        point_offsets: (0..10).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), 0.1]).collect(),
    };
    let (_, g_rpn) = rpn_loss(&model.rpn, &batch.anchor_features, &batch.anchor_targets, &cfg)?;
    out.push(check_params("rpn.loss", &model.rpn, &g_rpn, |h| {
        Ok(rpn_loss(h, &batch.anchor_features, &batch.anchor_targets, &cfg)?.0)
    })?);
    let aux_total = |a: &AuxHeads| -> Result<f64> {
        let (s, o, _) = aux_loss(a, &batch.point_features, &batch.point_foreground, &batch.point_offsets, &cfg)?;
        Ok(s + o)
    };
    let (_, _, g_aux) = aux_loss(&model.aux, &batch.point_features, &batch.point_foreground, &batch.point_offsets, &cfg)?;
    out.push(check_params("aux.loss", &model.aux, &g_aux, aux_total)?);
    let (_, g_all) = detector_loss(&model, &batch, &cfg)?;
    out.push(check_params("total.loss", &model, &g_all, |m| Ok(detector_loss(m, &batch, &cfg)?.0.total()))?);
    Ok(out)
}
