//! Trainable heads and the four loss terms: region proposals (`rpn`), graph
//! refinement (`gnn`), and the point-wise auxiliary segmentation and center
//! offset heads.
//!
//! Classification heads (proposal and refinement) always include the focal
//! background term; the segmentation head follows `LossConfig::focal_background`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{bev_iou_unchecked, decode_box, encode_box, BoxEncoding};
use crate::gnn::{GraphHeader, GraphUpdater, HeaderTrace, NeighborhoodGraph, UpdateTrace, BOX_RESIDUALS};
use crate::nnet::{
    focal_loss_grad, focal_loss_logits, offset_loss_grad, sigmoid, smooth_l1_grad, total_loss, Activation,
    DenseStack, LossConfig, Parameters,
};
use crate::scene::{normalize_yaw, Box3D};

/// Graph updater followed by the two-branch header.
#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub updater: GraphUpdater,
    pub header: GraphHeader,
}

impl Parameters for Refiner {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.updater.visit(f);
        self.header.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.updater.visit_mut(f);
        self.header.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct RefinerTrace {
    pub update: UpdateTrace,
    pub heads: Vec<HeaderTrace>,
}

impl RefinerTrace {
    pub fn logits(&self) -> Vec<f64> {
        self.heads.iter().map(HeaderTrace::logit).collect()
    }

    pub fn residuals(&self) -> Vec<[f64; BOX_RESIDUALS]> {
        self.heads.iter().map(HeaderTrace::residuals).collect()
    }
}

impl Refiner {
    pub fn zeros_like(&self) -> Self {
        Self {
            updater: self.updater.zeros_like(),
            header: self.header.zeros_like(),
        }
    }

    pub fn forward(&self, graph: &NeighborhoodGraph) -> Result<RefinerTrace> {
        let update = self.updater.forward(graph)?;
        let heads = update
            .outputs()
            .iter()
            .map(|z| self.header.forward(z))
            .collect::<Result<Vec<_>>>()?;
        Ok(RefinerTrace { update, heads })
    }

    /// Backpropagates per-node logit and residual gradients.
    pub fn backward(
        &self,
        graph: &NeighborhoodGraph,
        trace: &RefinerTrace,
        d_logits: &[f64],
        d_residuals: &[[f64; BOX_RESIDUALS]],
    ) -> Result<Refiner> {
        let mut header = self.header.zeros_like();
        let d_z = trace
            .heads
            .iter()
            .enumerate()
            .map(|(i, t)| self.header.backward_into(t, d_logits[i], &d_residuals[i], &mut header))
            .collect::<Result<Vec<_>>>()?;
        let upd = self.updater.backward(graph, &trace.update, &d_z)?;
        Ok(Refiner {
            updater: upd.params,
            header,
        })
    }

    /// Refined boxes, one per node: the residuals decoded against the node's
    /// proposal, scored by the sigmoid of the logit, class kept from the proposal.
    pub fn refine(&self, graph: &NeighborhoodGraph, proposals: &[Box3D]) -> Result<Vec<Box3D>> {
        if proposals.len() != graph.len() {
            return Err(Error::dim(graph.len(), proposals.len(), "proposals per graph node"));
        }
        let trace = self.forward(graph)?;
        trace
            .heads
            .iter()
            .zip(proposals)
            .map(|(t, p)| {
                let mut anchor = *p;
                anchor.score = Some(sigmoid(t.logit()));
                decode_box(&BoxEncoding(t.residuals()), &anchor)
            })
            .collect()
    }
}

/// Supervision for one box-shaped prediction (node or anchor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub foreground: bool,
    /// Residuals toward the assigned gt; meaningful only for foreground.
    pub residual: [f64; BOX_RESIDUALS],
}

/// Assigns each proposal its best-overlapping gt (lowest index on ties);
/// foreground when that BEV IoU is at least `fg_iou`. The yaw residual is
/// wrapped into `(-pi, pi]`, which decodes to the same box.
pub fn box_targets(proposals: &[Box3D], gts: &[Box3D], fg_iou: f64) -> Vec<BoxTarget> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let iou = bev_iou_unchecked(p, gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= fg_iou && iou > 0.0 => {
                    let mut r = encode_box(&gts[g], p).0;
                    r[6] = normalize_yaw(r[6]);
                    BoxTarget {
                        foreground: true,
                        residual: r,
                    }
                }
                _ => BoxTarget {
                    foreground: false,
                    residual: [0.0; BOX_RESIDUALS],
                },
            }
        })
        .collect()
}

/// Focal classification with background plus foreground-averaged smooth-L1
/// regression. Returns the loss and its gradients w.r.t. logits and residuals.
pub fn detection_loss(
    logits: &[f64],
    residuals: &[[f64; BOX_RESIDUALS]],
    targets: &[BoxTarget],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<[f64; BOX_RESIDUALS]>)> {
    if logits.len() != targets.len() || residuals.len() != targets.len() {
        return Err(Error::dim(targets.len(), logits.len(), "detection predictions"));
    }
    let fg: Vec<bool> = targets.iter().map(|t| t.foreground).collect();
    let cls_cfg = LossConfig {
        focal_background: true,
        ..*cfg
    };
    let (cls, d_logits) = focal_loss_logits(logits, &fg, &cls_cfg)?;
    let n_pos = fg.iter().filter(|&&f| f).count();
    let mut reg = 0.0;
    let mut d_res = vec![[0.0; BOX_RESIDUALS]; targets.len()];
    if n_pos > 0 {
        let norm = n_pos as f64;
        for (i, t) in targets.iter().enumerate().filter(|(_, t)| t.foreground) {
            let (l, g) = smooth_l1_grad(&residuals[i], &t.residual, cfg.smooth_l1_beta)?;
            reg += l / norm;
            for c in 0..BOX_RESIDUALS {
                d_res[i][c] = g[c] / norm;
            }
        }
    }
    Ok((cls + reg, d_logits, d_res))
}

/// Refinement loss and parameter gradients on one graph.
pub fn refiner_loss(
    refiner: &Refiner,
    graph: &NeighborhoodGraph,
    targets: &[BoxTarget],
    cfg: &LossConfig,
) -> Result<(f64, Refiner)> {
    let trace = refiner.forward(graph)?;
    let (loss, d_logits, d_res) = detection_loss(&trace.logits(), &trace.residuals(), targets, cfg)?;
    let grads = refiner.backward(graph, &trace, &d_logits, &d_res)?;
    Ok((loss, grads))
}

/// First-stage head: one stack mapping an anchor's BEV samples to a logit
/// followed by seven residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub stack: DenseStack,
}

impl RpnHead {
    pub fn glorot(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            stack: DenseStack::glorot(&[in_dim, hidden, 1 + BOX_RESIDUALS], Activation::Identity, rng)?,
        })
    }
}

impl Parameters for RpnHead {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.stack.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.stack.visit_mut(f);
    }
}

/// Proposal loss over sampled anchors: `features[i]` is anchor `i`'s input.
pub fn rpn_loss(
    head: &RpnHead,
    features: &[Vec<f64>],
    targets: &[BoxTarget],
    cfg: &LossConfig,
) -> Result<(f64, RpnHead)> {
    let traces = features
        .iter()
        .map(|x| head.stack.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
    let residuals: Vec<[f64; BOX_RESIDUALS]> = traces
        .iter()
        .map(|t| std::array::from_fn(|c| t.output()[1 + c]))
        .collect();
    let (loss, d_logits, d_res) = detection_loss(&logits, &residuals, targets, cfg)?;
    let mut grads = head.stack.zeros_like();
    for (i, t) in traces.iter().enumerate() {
        let mut up = vec![d_logits[i]];
        up.extend_from_slice(&d_res[i]);
        head.stack.backward_into(t, &up, &mut grads)?;
    }
    Ok((loss, RpnHead { stack: grads }))
}

/// Point-wise auxiliary heads on backbone features broadcast to raw points.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeads {
    /// Foreground logit.
    pub seg: DenseStack,
    /// Offset from the point to its object center.
    pub offset: DenseStack,
}

impl AuxHeads {
    pub fn glorot(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            seg: DenseStack::glorot(&[in_dim, hidden, 1], Activation::Identity, rng)?,
            offset: DenseStack::glorot(&[in_dim, hidden, 3], Activation::Identity, rng)?,
        })
    }
}

impl Parameters for AuxHeads {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.seg.visit(f);
        self.offset.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.seg.visit_mut(f);
        self.offset.visit_mut(f);
    }
}

/// Segmentation and offset losses `(l_seg, l_offset)` with their gradients.
pub fn aux_loss(
    heads: &AuxHeads,
    features: &[Vec<f64>],
    foreground: &[bool],
    offsets: &[[f64; 3]],
    cfg: &LossConfig,
) -> Result<(f64, f64, AuxHeads)> {
    if features.len() != foreground.len() || features.len() != offsets.len() {
        return Err(Error::dim(features.len(), foreground.len(), "auxiliary targets"));
    }
    let seg_traces = features
        .iter()
        .map(|x| heads.seg.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let off_traces = features
        .iter()
        .map(|x| heads.offset.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = seg_traces.iter().map(|t| sigmoid(t.output()[0])).collect();
    let (l_seg, dp) = focal_loss_grad(&p, foreground, cfg)?;
    let pred: Vec<[f64; 3]> = off_traces
        .iter()
        .map(|t| [t.output()[0], t.output()[1], t.output()[2]])
        .collect();
    let (l_off, d_off) = offset_loss_grad(&pred, offsets, foreground, cfg.smooth_l1_beta)?;
    let mut grads = AuxHeads {
        seg: heads.seg.zeros_like(),
        offset: heads.offset.zeros_like(),
    };
    for i in 0..features.len() {
        let dz = dp[i] * p[i] * (1.0 - p[i]);
        if dz != 0.0 {
            heads.seg.backward_into(&seg_traces[i], &[dz], &mut grads.seg)?;
        }
        if foreground[i] {
            heads.offset.backward_into(&off_traces[i], &d_off[i], &mut grads.offset)?;
        }
    }
    Ok((l_seg, l_off, grads))
}

/// Every trainable part of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub rpn: RpnHead,
    pub refiner: Refiner,
    pub aux: AuxHeads,
}

impl Parameters for DetectorModel {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.rpn.visit(f);
        self.refiner.visit(f);
        self.aux.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.rpn.visit_mut(f);
        self.refiner.visit_mut(f);
        self.aux.visit_mut(f);
    }
}

/// Fixed inputs and targets for all four loss terms.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub anchor_features: Vec<Vec<f64>>,
    pub anchor_targets: Vec<BoxTarget>,
    pub graph: NeighborhoodGraph,
    pub node_targets: Vec<BoxTarget>,
    pub point_features: Vec<Vec<f64>>,
    pub point_foreground: Vec<bool>,
    pub point_offsets: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub gnn: f64,
    pub offset: f64,
    pub seg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        total_loss(self.rpn, self.gnn, self.offset, self.seg)
    }
}

/// All four terms and the gradient of their sum.
pub fn detector_loss(model: &DetectorModel, batch: &TrainingBatch, cfg: &LossConfig) -> Result<(LossBreakdown, DetectorModel)> {
    let (rpn, g_rpn) = rpn_loss(&model.rpn, &batch.anchor_features, &batch.anchor_targets, cfg)?;
    let (gnn, g_ref) = refiner_loss(&model.refiner, &batch.graph, &batch.node_targets, cfg)?;
    let (seg, offset, g_aux) = aux_loss(
        &model.aux,
        &batch.point_features,
        &batch.point_foreground,
        &batch.point_offsets,
        cfg,
    )?;
    Ok((
        LossBreakdown { rpn, gnn, offset, seg },
        DetectorModel {
            rpn: g_rpn,
            refiner: g_ref,
            aux: g_aux,
        },
    ))
}

/// Adam over a flat parameter view.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let g = grads.to_flat();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.t = 0;
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut k = 0;
        params.visit_mut(&mut |p| {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            k += 1;
        });
    }
}
