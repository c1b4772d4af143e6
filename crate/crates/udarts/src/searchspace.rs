//! DARTS-style cells with softmax-mixed candidate operations, concrete
//! dropout insertion points, network stacking, and discretization.
//!
//! Candidate convolutions follow the `ReLU(+dropout)-Conv-BN` ordering;
//! separable convolutions are a depthwise/pointwise pair applied twice,
//! dilated ones a single pair at dilation 2. Every operation is unit
//! stride with resolution-preserving padding, except that in reduction
//! cells the edges leaving the two input nodes run at stride 2 and the
//! base channel count doubles.
//!
//! A cell's output is the channel concatenation of its intermediate
//! nodes; each cell receives the outputs of the previous two cells,
//! preprocessed only when channel width or resolution disagree.

use crate::autodiff::{ParamClass, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::uncertainty::{self, DropoutParams, SiteTerm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data mismatch in init")
}

// ── Catalog ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateOp {
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
    Identity,
    Zero,
}

impl CandidateOp {
    pub fn name(self) -> &'static str {
        match self {
            CandidateOp::SepConv3 => "sep_conv_3x3",
            CandidateOp::SepConv5 => "sep_conv_5x5",
            CandidateOp::DilConv3 => "dil_conv_3x3",
            CandidateOp::DilConv5 => "dil_conv_5x5",
            CandidateOp::MaxPool3 => "max_pool_3x3",
            CandidateOp::AvgPool3 => "avg_pool_3x3",
            CandidateOp::Identity => "identity",
            CandidateOp::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sep_conv_3x3" => CandidateOp::SepConv3,
            "sep_conv_5x5" => CandidateOp::SepConv5,
            "dil_conv_3x3" => CandidateOp::DilConv3,
            "dil_conv_5x5" => CandidateOp::DilConv5,
            "max_pool_3x3" => CandidateOp::MaxPool3,
            "avg_pool_3x3" => CandidateOp::AvgPool3,
            "identity" => CandidateOp::Identity,
            "zero" => CandidateOp::Zero,
            _ => return None,
        })
    }

    /// Convolutional candidates carry weights and dropout sites.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            CandidateOp::SepConv3 | CandidateOp::SepConv5 | CandidateOp::DilConv3 | CandidateOp::DilConv5
        )
    }
}

/// Ordered candidate set. The order is fixed: it is the column binding of
/// the architecture logits and is stable across save/load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCatalog {
    ops: Vec<CandidateOp>,
}

impl OpCatalog {
    /// The eight-operation catalog: separable 3x3/5x5, dilated 3x3/5x5,
    /// max pool, avg pool, identity, zero.
    pub fn standard() -> Self {
        OpCatalog {
            ops: vec![
                CandidateOp::SepConv3,
                CandidateOp::SepConv5,
                CandidateOp::DilConv3,
                CandidateOp::DilConv5,
                CandidateOp::MaxPool3,
                CandidateOp::AvgPool3,
                CandidateOp::Identity,
                CandidateOp::Zero,
            ],
        }
    }

    pub fn custom(ops: Vec<CandidateOp>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::BadNetworkSpec("catalog must not be empty".into()));
        }
        Ok(OpCatalog { ops })
    }

    pub fn ops(&self) -> &[CandidateOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: CandidateOp) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }
}

// ── Cell topology ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Normal,
    Reduction,
}

/// DAG skeleton of a cell: two input states (0, 1), `n_nodes`
/// intermediates, every edge `(i, j)` with `i < j`. The output node is
/// the channel concatenation of the intermediates only.
#[derive(Clone, Debug)]
pub struct CellGraph {
    pub n_nodes: usize,
    pub kind: CellKind,
}

impl CellGraph {
    pub fn new(n_nodes: usize, kind: CellKind) -> Self {
        CellGraph { n_nodes, kind }
    }

    /// Edges in alpha-row order: for each intermediate node `t` (absolute
    /// state `2 + t`), predecessors `0..2+t` ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.n_nodes {
            for i in 0..2 + t {
                out.push((i, 2 + t));
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.n_nodes * 2 + self.n_nodes * (self.n_nodes - 1) / 2
    }

    /// Row index of edge `(i, 2+t)` in the alpha matrix.
    pub fn edge_row(&self, pred: usize, node: usize) -> usize {
        debug_assert!(node >= 2 && pred < node);
        let t = node - 2;
        t * 2 + t * t.saturating_sub(1) / 2 + pred
    }
}

/// Per-edge, per-candidate logits; one shared tensor for all normal
/// cells and one for all reduction cells.
#[derive(Clone, Copy, Debug)]
pub struct ArchitectureParams {
    pub normal: ParamId,
    pub reduce: ParamId,
}

// ── Network specification ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutPlacement {
    /// No dropout anywhere (plain DARTS).
    None,
    /// After every ReLU inside convolutional candidates, plus one site
    /// before the final classifier. Pool/identity/zero carry none.
    ConvsAndClassifier,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_cells: usize,
    pub n_nodes: usize,
    pub channels: usize,
    pub reduction_positions: Vec<usize>,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub dropout_sites: DropoutPlacement,
}

impl NetworkSpec {
    /// Desk-scale default: 4 cells, 4 intermediate nodes, 8 base
    /// channels, reductions at one and two thirds of the depth. The
    /// full-scale reference configuration uses 14 cells.
    pub fn desk_default(input_shape: [usize; 3], classes: usize) -> Self {
        let n_cells = 4;
        NetworkSpec {
            n_cells,
            n_nodes: 4,
            channels: 8,
            reduction_positions: vec![n_cells / 3, 2 * n_cells / 3],
            input_shape,
            classes,
            dropout_sites: DropoutPlacement::ConvsAndClassifier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_nodes == 0 || self.channels == 0 {
            return Err(Error::BadNetworkSpec(
                "n_cells, n_nodes and channels must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::BadNetworkSpec("need at least two classes".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::BadNetworkSpec("input shape has a zero extent".into()));
        }
        for &p in &self.reduction_positions {
            if p == 0 || p >= self.n_cells {
                return Err(Error::BadNetworkSpec(format!(
                    "reduction position {p} not strictly inside (0, {})",
                    self.n_cells
                )));
            }
        }
        let mut sorted = self.reduction_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.reduction_positions.len() {
            return Err(Error::BadNetworkSpec("duplicate reduction positions".into()));
        }
        Ok(())
    }
}

// ── Parameter bundles ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlockIds {
    /// Dropout site index into `DropoutParams::logit_ids`, when placed.
    site: Option<usize>,
    dw: ParamId,
    pw: ParamId,
    bn: BnIds,
    dilation: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
enum OpInstance {
    SepConv([ConvBlockIds; 2]),
    DilConv(ConvBlockIds),
    MaxPool,
    AvgPool,
    Identity,
    /// Identity on a stride-2 edge: ReLU, 1x1 conv at stride 2, BN.
    FactorizedReduce { conv: ParamId, bn: BnIds },
    Zero,
}

#[derive(Clone, Debug)]
struct EdgeInstance {
    from: usize,
    stride: usize,
    ops: Vec<OpInstance>,
}

#[derive(Clone, Debug)]
enum Preproc {
    Identity,
    ReluConvBn { conv: ParamId, stride: usize, bn: BnIds },
}

#[derive(Clone, Debug)]
struct CellInstance {
    kind: CellKind,
    pre0: Preproc,
    pre1: Preproc,
    /// Per intermediate node, its incoming edges in predecessor order.
    node_edges: Vec<Vec<EdgeInstance>>,
}

/// Dropout site metadata for the regularizer: the weights consuming the
/// masked activation and the per-sample unit count it masks.
#[derive(Clone, Debug)]
pub struct SiteInfo {
    pub logit: ParamId,
    pub weights: Vec<ParamId>,
    pub k_units: f64,
}

// ── The mixed network ────────────────────────────────────────────────

pub struct Network {
    pub spec: NetworkSpec,
    pub catalog: OpCatalog,
    pub arch: ArchitectureParams,
    pub dropout: DropoutParams,
    pub sites: Vec<SiteInfo>,
    stem_conv: ParamId,
    stem_bn: BnIds,
    cells: Vec<CellInstance>,
    classifier_w: ParamId,
    classifier_b: ParamId,
    classifier_site: Option<usize>,
    n_edges: usize,
}

/// Anything that can run a differentiable forward pass over the store:
/// the mixed search network and its discretized counterpart.
pub trait ForwardModel {
    fn forward_on(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, opts: FwdOptions) -> Result<PassVars>;
    fn dropout_params(&self) -> &DropoutParams;
    fn classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];
    fn has_dropout(&self) -> bool {
        !self.dropout_params().logit_ids.is_empty()
    }
}

impl ForwardModel for Network {
    fn forward_on(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, opts: FwdOptions) -> Result<PassVars> {
        Network::forward_on(self, tape, store, x, opts)
    }

    fn dropout_params(&self) -> &DropoutParams {
        &self.dropout
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }
}

impl ForwardModel for DiscreteNetwork {
    fn forward_on(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, opts: FwdOptions) -> Result<PassVars> {
        DiscreteNetwork::forward_on(self, tape, store, x, opts)
    }

    fn dropout_params(&self) -> &DropoutParams {
        self.dropout()
    }

    fn classes(&self) -> usize {
        self.spec().classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec().input_shape
    }
}

/// Where dropout noise comes from during a pass.
pub enum DropoutMode<'a> {
    /// Fresh concrete masks from this stream.
    Sample(&'a mut ChaCha8Rng),
    /// Deterministic pass: masks replaced by their rescaled expectation,
    /// which is the identity.
    Bypass,
}

pub struct FwdOptions<'a> {
    pub bn_batch_stats: bool,
    /// Collect updated running averages (training passes only).
    pub update_running: bool,
    pub dropout: DropoutMode<'a>,
}

impl<'a> FwdOptions<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        FwdOptions {
            bn_batch_stats: true,
            update_running: true,
            dropout: DropoutMode::Sample(rng),
        }
    }

    /// Stochastic pass without state side effects (MC sampling).
    pub fn sample(rng: &'a mut ChaCha8Rng) -> Self {
        FwdOptions {
            bn_batch_stats: true,
            update_running: false,
            dropout: DropoutMode::Sample(rng),
        }
    }

    /// Fully deterministic pass on batch statistics.
    pub fn deterministic() -> Self {
        FwdOptions {
            bn_batch_stats: true,
            update_running: false,
            dropout: DropoutMode::Bypass,
        }
    }

    /// Inference pass on running statistics.
    pub fn eval() -> Self {
        FwdOptions {
            bn_batch_stats: false,
            update_running: false,
            dropout: DropoutMode::Bypass,
        }
    }
}

/// Everything one forward pass exposes on its tape.
pub struct PassVars {
    pub logits: Var,
    pub probs: Var,
    /// Updated running-average values to fold back into the store.
    pub bn_updates: Vec<(ParamId, Tensor)>,
    /// Regularizer view of every dropout site bound on this tape.
    pub reg_sites: Vec<SiteTerm>,
    /// Intermediate node values per cell, for introspection and tests.
    pub cell_nodes: Vec<Vec<Var>>,
    pub cell_outputs: Vec<Var>,
}

struct BuildCtx<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    sites: Vec<SiteInfo>,
    placement: DropoutPlacement,
    init_p: f64,
}

impl<'a> BuildCtx<'a> {
    /// Reuse an existing parameter by name or register a fresh one, so a
    /// rebuild over a populated store (discrete over mixed, checkpoint
    /// reload) binds the same ids and values.
    fn reg(&mut self, name: String, class: ParamClass, make: impl FnOnce(&mut ChaCha8Rng) -> Tensor) -> ParamId {
        if let Some(id) = self.store.id_by_name(&name) {
            return id;
        }
        let t = make(self.rng);
        self.store.register(name, class, t)
    }

    fn conv_weight(&mut self, name: String, c_out: usize, c_in_g: usize, k: usize, groups: usize) -> ParamId {
        let fan_in = c_in_g * k * k;
        let fan_out = (c_out / groups) * k * k;
        self.reg(name, ParamClass::Weight, |rng| {
            glorot(rng, vec![c_out, c_in_g, k, k], fan_in, fan_out)
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIds {
        BnIds {
            gamma: self.reg(format!("{name}.bn_gamma"), ParamClass::Weight, |_| {
                Tensor::full(&[c], 1.0)
            }),
            beta: self.reg(format!("{name}.bn_beta"), ParamClass::Weight, |_| Tensor::zeros(&[c])),
            run_mean: self.reg(format!("{name}.bn_run_mean"), ParamClass::RunningStat, |_| {
                Tensor::zeros(&[c])
            }),
            run_var: self.reg(format!("{name}.bn_run_var"), ParamClass::RunningStat, |_| {
                Tensor::full(&[c], 1.0)
            }),
        }
    }

    /// Register a dropout site; returns its index when placement asks
    /// for sites, otherwise `None`.
    fn site(&mut self, name: String, weights: Vec<ParamId>, k_units: f64) -> Option<usize> {
        match self.placement {
            DropoutPlacement::None => None,
            DropoutPlacement::ConvsAndClassifier => {
                let p = self.init_p;
                let logit = self.reg(format!("{name}.drop_logit"), ParamClass::DropoutLogit, |_| {
                    Tensor::scalar(uncertainty::init_logit(p))
                });
                self.sites.push(SiteInfo {
                    logit,
                    weights,
                    k_units,
                });
                Some(self.sites.len() - 1)
            }
        }
    }

    fn conv_block(
        &mut self,
        name: String,
        c: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        spatial_in: (usize, usize),
    ) -> ConvBlockIds {
        let dw = self.conv_weight(format!("{name}.dw"), c, 1, kernel, c);
        let pw = self.conv_weight(format!("{name}.pw"), c, c, 1, 1);
        let bn = self.bn(&name, c);
        // The site masks the ReLU output consumed by this block's convs.
        let k_units = (c * spatial_in.0 * spatial_in.1) as f64;
        let site = self.site(name, vec![dw, pw], k_units);
        ConvBlockIds {
            site,
            dw,
            pw,
            bn,
            dilation,
            stride,
        }
    }
}

impl Network {
    /// Build a mixed-operation network: stacked cells over the catalog,
    /// architecture logits shared per cell kind, concrete-dropout sites
    /// per the spec's placement. Fresh parameters are registered in
    /// `store` under stable names.
    pub fn build(
        spec: NetworkSpec,
        catalog: OpCatalog,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        temperature: f64,
        length_scale: f64,
        tau_inverse: f64,
        init_p: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let mut ctx = BuildCtx {
            store,
            rng,
            sites: Vec::new(),
            placement: spec.dropout_sites,
            init_p,
        };

        let (c_in, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
        let stem_conv = ctx.conv_weight("stem.conv".into(), spec.channels, c_in, 1, 1);
        let stem_bn = ctx.bn("stem", spec.channels);

        // Channel/resolution bookkeeping across the stack.
        let mut c_pp = spec.channels; // channels of s0
        let mut c_p = spec.channels; // channels of s1
        let mut hw_pp = (h, w);
        let mut hw_p = (h, w);
        let mut c_curr = spec.channels;

        let graph_edges = |n_nodes: usize| CellGraph::new(n_nodes, CellKind::Normal).edges();

        let mut cells = Vec::with_capacity(spec.n_cells);
        for cell_idx in 0..spec.n_cells {
            let is_reduction = spec.reduction_positions.contains(&cell_idx);
            if is_reduction {
                c_curr *= 2;
            }
            let kind = if is_reduction { CellKind::Reduction } else { CellKind::Normal };

            // Preprocess inputs when their width or resolution disagree
            // with the cell's working shape.
            let mut make_pre = |tag: &str, c_from: usize, hw_from: (usize, usize)| -> Preproc {
                let stride = if hw_from != hw_p { 2 } else { 1 };
                if c_from == c_curr && stride == 1 {
                    Preproc::Identity
                } else {
                    let name = format!("cell{cell_idx}.pre{tag}");
                    let conv = ctx.conv_weight(format!("{name}.conv"), c_curr, c_from, 1, 1);
                    let bn = ctx.bn(&name, c_curr);
                    Preproc::ReluConvBn { conv, stride, bn }
                }
            };
            let pre0 = make_pre("0", c_pp, hw_pp);
            let pre1 = make_pre("1", c_p, hw_p);

            // Working resolution of input states and of intermediates.
            let hw_in = hw_p;
            let hw_out = if is_reduction {
                ((hw_in.0 + 1) / 2, (hw_in.1 + 1) / 2)
            } else {
                hw_in
            };

            let mut node_edges: Vec<Vec<EdgeInstance>> = vec![Vec::new(); spec.n_nodes];
            for (pred, node) in graph_edges(spec.n_nodes) {
                let stride = if is_reduction && pred < 2 { 2 } else { 1 };
                let spatial_in = if is_reduction && pred < 2 { hw_in } else { hw_out };
                let mut ops = Vec::with_capacity(catalog.len());
                for (op_idx, &op) in catalog.ops().iter().enumerate() {
                    let name = format!("cell{cell_idx}.e{pred}_{node}.op{op_idx}_{}", op.name());
                    let inst = match op {
                        CandidateOp::SepConv3 => OpInstance::SepConv([
                            ctx.conv_block(format!("{name}.b0"), c_curr, 3, 1, stride, spatial_in),
                            ctx.conv_block(format!("{name}.b1"), c_curr, 3, 1, 1, hw_out),
                        ]),
                        CandidateOp::SepConv5 => OpInstance::SepConv([
                            ctx.conv_block(format!("{name}.b0"), c_curr, 5, 1, stride, spatial_in),
                            ctx.conv_block(format!("{name}.b1"), c_curr, 5, 1, 1, hw_out),
                        ]),
                        CandidateOp::DilConv3 => {
                            OpInstance::DilConv(ctx.conv_block(format!("{name}.b0"), c_curr, 3, 2, stride, spatial_in))
                        }
                        CandidateOp::DilConv5 => {
                            OpInstance::DilConv(ctx.conv_block(format!("{name}.b0"), c_curr, 5, 2, stride, spatial_in))
                        }
                        CandidateOp::MaxPool3 => OpInstance::MaxPool,
                        CandidateOp::AvgPool3 => OpInstance::AvgPool,
                        CandidateOp::Identity => {
                            if stride == 1 {
                                OpInstance::Identity
                            } else {
                                let conv = ctx.conv_weight(format!("{name}.fr_conv"), c_curr, c_curr, 1, 1);
                                let bn = ctx.bn(&format!("{name}.fr"), c_curr);
                                OpInstance::FactorizedReduce { conv, bn }
                            }
                        }
                        CandidateOp::Zero => OpInstance::Zero,
                    };
                    ops.push(inst);
                }
                node_edges[node - 2].push(EdgeInstance {
                    from: pred,
                    stride,
                    ops,
                });
            }
            cells.push(CellInstance {
                kind,
                pre0,
                pre1,
                node_edges,
            });

            c_pp = c_p;
            c_p = spec.n_nodes * c_curr;
            hw_pp = hw_p;
            hw_p = hw_out;
        }
        h = hw_p.0;
        w = hw_p.1;
        let _ = (h, w);

        // Classifier over globally pooled features, with its own site.
        let feat = c_p;
        let classes = spec.classes;
        let classifier_w = ctx.reg("classifier.w".into(), ParamClass::Weight, |rng| {
            glorot(rng, vec![feat, classes], feat, classes)
        });
        let classifier_b = ctx.reg("classifier.b".into(), ParamClass::Weight, |_| {
            Tensor::zeros(&[classes])
        });
        let classifier_site = ctx.site("classifier".into(), vec![classifier_w], feat as f64);

        // Architecture logits, one row per edge per cell kind, zero-init.
        let n_edges = CellGraph::new(spec.n_nodes, CellKind::Normal).n_edges();
        let n_ops = catalog.len();
        let arch = ArchitectureParams {
            normal: ctx.reg("alpha_normal".into(), ParamClass::Alpha, |_| {
                Tensor::zeros(&[n_edges, n_ops])
            }),
            reduce: ctx.reg("alpha_reduce".into(), ParamClass::Alpha, |_| {
                Tensor::zeros(&[n_edges, n_ops])
            }),
        };

        let dropout = DropoutParams {
            logit_ids: ctx.sites.iter().map(|s| s.logit).collect(),
            temperature,
            length_scale,
            tau_inverse,
        };
        let sites = ctx.sites;

        Ok(Network {
            spec,
            catalog,
            arch,
            dropout,
            sites,
            stem_conv,
            stem_bn,
            cells,
            classifier_w,
            classifier_b,
            classifier_site,
            n_edges,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Forward on a fresh tape.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, opts: FwdOptions) -> Result<(Tape, PassVars)> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, store, x, opts)?;
        Ok((tape, vars))
    }

    /// Forward appended to an existing tape (several passes can share
    /// one tape, as Monte-Carlo sampling does).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        mut opts: FwdOptions,
    ) -> Result<PassVars> {
        let sx = x.shape();
        if sx.len() != 4
            || sx[1] != self.spec.input_shape[0]
            || sx[2] != self.spec.input_shape[1]
            || sx[3] != self.spec.input_shape[2]
        {
            return Err(Error::ShapeMismatch {
                op: "network_forward",
                expected: vec![
                    sx.first().copied().unwrap_or(1),
                    self.spec.input_shape[0],
                    self.spec.input_shape[1],
                    self.spec.input_shape[2],
                ],
                got: sx.to_vec(),
            });
        }

        let mut pass = PassState {
            tape,
            store,
            bn_updates: Vec::new(),
            reg_sites: Vec::new(),
            bn_batch: opts.bn_batch_stats,
            update_running: opts.update_running,
        };

        let xin = pass.tape.constant(x.clone())?;
        let stem_w = pass.tape.param(store, self.stem_conv)?;
        let stem = pass.tape.conv2d(xin, stem_w, 1, 1, 1)?;
        let stem = pass.bn(stem, &self.stem_bn)?;

        let mut s0 = stem;
        let mut s1 = stem;
        let mut cell_nodes_all = Vec::with_capacity(self.cells.len());
        let mut cell_outputs = Vec::with_capacity(self.cells.len());

        for (cell_idx, cell) in self.cells.iter().enumerate() {
            let p0 = pass.preprocess(s0, &cell.pre0)?;
            let p1 = pass.preprocess(s1, &cell.pre1)?;
            let alpha_id = match cell.kind {
                CellKind::Normal => self.arch.normal,
                CellKind::Reduction => self.arch.reduce,
            };
            let alpha = pass.tape.param(store, alpha_id)?;
            let weights = pass.tape.softmax(alpha)?;

            let mut states = vec![p0, p1];
            let mut nodes = Vec::with_capacity(self.spec.n_nodes);
            let graph = CellGraph::new(self.spec.n_nodes, cell.kind);
            for (t, edges) in cell.node_edges.iter().enumerate() {
                let mut acc: Option<Var> = None;
                for edge in edges {
                    let row = graph.edge_row(edge.from, 2 + t);
                    let input = states[edge.from];
                    let mut mixed: Option<Var> = None;
                    for (op_idx, op) in edge.ops.iter().enumerate() {
                        let out = pass.candidate(input, op, edge.stride, &self.sites, &mut opts.dropout, self)?;
                        let w_scalar = pass.tape.index(weights, row * self.catalog.len() + op_idx)?;
                        let scaled = pass.tape.scale(out, w_scalar)?;
                        mixed = Some(match mixed {
                            Some(m) => pass.tape.add(m, scaled)?,
                            None => scaled,
                        });
                    }
                    let mixed = mixed.expect("catalog is non-empty");
                    acc = Some(match acc {
                        Some(a) => pass.tape.add(a, mixed)?,
                        None => mixed,
                    });
                }
                let node = acc.expect("every node has incoming edges");
                states.push(node);
                nodes.push(node);
            }
            let out = pass.tape.concat_channels(&nodes)?;
            cell_nodes_all.push(nodes);
            cell_outputs.push(out);
            s0 = s1;
            s1 = out;
            let _ = cell_idx;
        }

        let pooled = pass.tape.global_avg_pool(s1)?;
        let features = match (self.classifier_site, &mut opts.dropout) {
            (Some(site_idx), DropoutMode::Sample(rng)) => {
                let info = &self.sites[site_idx];
                let logit = pass.tape.param(store, info.logit)?;
                let masked =
                    uncertainty::apply_concrete_dropout(pass.tape, pooled, logit, self.dropout.temperature, rng)?;
                pass.note_site(info, logit);
                masked
            }
            (Some(site_idx), DropoutMode::Bypass) => {
                let info = &self.sites[site_idx];
                let logit = pass.tape.param(store, info.logit)?;
                pass.note_site(info, logit);
                pooled
            }
            (None, _) => pooled,
        };
        let cw = pass.tape.param(store, self.classifier_w)?;
        let cb = pass.tape.param(store, self.classifier_b)?;
        let logits = pass.tape.matmul(features, cw)?;
        let logits = pass.tape.add_bias(logits, cb)?;
        let probs = pass.tape.softmax(logits)?;

        Ok(PassVars {
            logits,
            probs,
            bn_updates: pass.bn_updates,
            reg_sites: pass.reg_sites,
            cell_nodes: cell_nodes_all,
            cell_outputs,
        })
    }
}

/// Shared forward machinery for mixed and discrete networks.
struct PassState<'t, 's> {
    tape: &'t mut Tape,
    store: &'s ParamStore,
    bn_updates: Vec<(ParamId, Tensor)>,
    reg_sites: Vec<SiteTerm>,
    bn_batch: bool,
    update_running: bool,
}

impl<'t, 's> PassState<'t, 's> {
    fn bn(&mut self, x: Var, ids: &BnIds) -> Result<Var> {
        let gamma = self.tape.param(self.store, ids.gamma)?;
        let beta = self.tape.param(self.store, ids.beta)?;
        if self.bn_batch {
            let (out, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            if self.update_running {
                let old_m = self.store.get(ids.run_mean);
                let old_v = self.store.get(ids.run_var);
                let new_m: Vec<f64> = old_m
                    .data()
                    .iter()
                    .zip(stats.mean.iter())
                    .map(|(&o, &n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
                    .collect();
                let new_v: Vec<f64> = old_v
                    .data()
                    .iter()
                    .zip(stats.var.iter())
                    .map(|(&o, &n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
                    .collect();
                self.bn_updates
                    .push((ids.run_mean, Tensor::new(old_m.shape().to_vec(), new_m)?));
                self.bn_updates
                    .push((ids.run_var, Tensor::new(old_v.shape().to_vec(), new_v)?));
            }
            Ok(out)
        } else {
            self.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.store.get(ids.run_mean),
                self.store.get(ids.run_var),
                BN_EPS,
            )
        }
    }

    fn preprocess(&mut self, x: Var, pre: &Preproc) -> Result<Var> {
        match pre {
            Preproc::Identity => Ok(x),
            Preproc::ReluConvBn { conv, stride, bn } => {
                let r = self.tape.relu(x)?;
                let w = self.tape.param(self.store, *conv)?;
                let c = self.tape.conv2d(r, w, *stride, 1, 1)?;
                self.bn(c, bn)
            }
        }
    }

    fn note_site(&mut self, info: &SiteInfo, logit: Var) {
        let weights = info
            .weights
            .iter()
            .map(|&w| self.tape.param(self.store, w))
            .collect::<Result<Vec<_>>>()
            .expect("site weights bind");
        self.reg_sites.push(SiteTerm {
            logit,
            weights,
            k_units: info.k_units,
        });
    }

    fn conv_block(
        &mut self,
        x: Var,
        block: &ConvBlockIds,
        sites: &[SiteInfo],
        dropout: &mut DropoutMode,
        net: &Network,
    ) -> Result<Var> {
        let r = self.tape.relu(x)?;
        let r = match (block.site, &mut *dropout) {
            (Some(site_idx), DropoutMode::Sample(rng)) => {
                let info = &sites[site_idx];
                let logit = self.tape.param(self.store, info.logit)?;
                let masked =
                    uncertainty::apply_concrete_dropout(self.tape, r, logit, net.dropout.temperature, rng)?;
                self.note_site(info, logit);
                masked
            }
            (Some(site_idx), DropoutMode::Bypass) => {
                let info = &sites[site_idx];
                let logit = self.tape.param(self.store, info.logit)?;
                self.note_site(info, logit);
                r
            }
            (None, _) => r,
        };
        let dw = self.tape.param(self.store, block.dw)?;
        let c_in = self.tape.value(r).shape()[1];
        let c = self.tape.conv2d(r, dw, block.stride, block.dilation, c_in)?;
        let pw = self.tape.param(self.store, block.pw)?;
        let c = self.tape.conv2d(c, pw, 1, 1, 1)?;
        self.bn(c, &block.bn)
    }

    fn candidate(
        &mut self,
        x: Var,
        op: &OpInstance,
        stride: usize,
        sites: &[SiteInfo],
        dropout: &mut DropoutMode,
        net: &Network,
    ) -> Result<Var> {
        match op {
            OpInstance::SepConv(blocks) => {
                let h = self.conv_block(x, &blocks[0], sites, dropout, net)?;
                self.conv_block(h, &blocks[1], sites, dropout, net)
            }
            OpInstance::DilConv(block) => self.conv_block(x, block, sites, dropout, net),
            OpInstance::MaxPool => self.tape.max_pool3(x, stride),
            OpInstance::AvgPool => self.tape.avg_pool3(x, stride),
            OpInstance::Identity => Ok(x),
            OpInstance::FactorizedReduce { conv, bn } => {
                let r = self.tape.relu(x)?;
                let w = self.tape.param(self.store, *conv)?;
                let c = self.tape.conv2d(r, w, 2, 1, 1)?;
                self.bn(c, bn)
            }
            OpInstance::Zero => {
                let sx = self.tape.value(x).shape();
                let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (ho, wo) = if stride == 2 { ((h + 1) / 2, (w + 1) / 2) } else { (h, w) };
                self.tape.zeros(&[b, c, ho, wo])
            }
        }
    }
}

// ── Standalone mixed op ──────────────────────────────────────────────

/// Softmax-weighted sum of candidate outputs:
/// `sum_o softmax(alpha)_o * candidate_o`, differentiable in the logits
/// and in each candidate.
pub fn mixed_op_forward(tape: &mut Tape, candidates: &[Var], alpha_row: Var) -> Result<Var> {
    if tape.value(alpha_row).len() != candidates.len() {
        return Err(Error::ShapeMismatch {
            op: "mixed_op",
            expected: vec![candidates.len()],
            got: tape.value(alpha_row).shape().to_vec(),
        });
    }
    let shape = tape.value(candidates[0]).shape().to_vec();
    for &c in candidates {
        if tape.value(c).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "mixed_op",
                expected: shape,
                got: tape.value(c).shape().to_vec(),
            });
        }
    }
    let weights = tape.softmax(alpha_row)?;
    let mut acc: Option<Var> = None;
    for (i, &c) in candidates.iter().enumerate() {
        let w = tape.index(weights, i)?;
        let scaled = tape.scale(c, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("non-empty candidates"))
}

// ── Discretization ───────────────────────────────────────────────────

/// Final architecture: per intermediate node, its `k` retained
/// `(predecessor, op)` pairs. The zero op is never retained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub k: usize,
    /// Per node: `(predecessor state index, op name)` pairs.
    pub normal: Vec<Vec<(usize, String)>>,
    pub reduce: Vec<Vec<(usize, String)>>,
}

impl DiscreteArchitecture {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Retain, per intermediate node, the `k` incoming `(edge, op)` pairs
/// with the largest softmax weight, excluding `zero` and using at most
/// one op per edge. Ties break deterministically: lower edge index,
/// then lower op index.
pub fn discretize(
    store: &ParamStore,
    arch: &ArchitectureParams,
    catalog: &OpCatalog,
    n_nodes: usize,
    k: usize,
) -> Result<DiscreteArchitecture> {
    let normal = discretize_kind(store.get(arch.normal), catalog, n_nodes, k)?;
    let reduce = discretize_kind(store.get(arch.reduce), catalog, n_nodes, k)?;
    Ok(DiscreteArchitecture { k, normal, reduce })
}

fn discretize_kind(
    alpha: &Tensor,
    catalog: &OpCatalog,
    n_nodes: usize,
    k: usize,
) -> Result<Vec<Vec<(usize, String)>>> {
    let graph = CellGraph::new(n_nodes, CellKind::Normal);
    let n_ops = catalog.len();
    let mut out = Vec::with_capacity(n_nodes);
    for t in 0..n_nodes {
        let preds = 2 + t;
        let has_non_zero = catalog.ops().iter().any(|&o| o != CandidateOp::Zero);
        let available = if has_non_zero { preds } else { 0 };
        if k > available {
            return Err(Error::KExceedsCandidates {
                k,
                available,
                node: t,
            });
        }
        // All (edge, op) pairs with softmax weight over the full row.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for pred in 0..preds {
            let row = graph.edge_row(pred, 2 + t);
            let logits = &alpha.data()[row * n_ops..(row + 1) * n_ops];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (op_idx, &op) in catalog.ops().iter().enumerate() {
                if op == CandidateOp::Zero {
                    continue;
                }
                pairs.push((exps[op_idx] / z, pred, op_idx));
            }
        }
        // Sort by weight descending; ties by lower edge then lower op.
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut chosen: Vec<(usize, String)> = Vec::with_capacity(k);
        let mut used_edges = vec![false; preds];
        for (_, pred, op_idx) in pairs {
            if chosen.len() == k {
                break;
            }
            if used_edges[pred] {
                continue;
            }
            used_edges[pred] = true;
            chosen.push((pred, catalog.ops()[op_idx].name().to_string()));
        }
        chosen.sort_by_key(|(pred, _)| *pred);
        out.push(chosen);
    }
    Ok(out)
}

// ── Discrete network ─────────────────────────────────────────────────

/// Network assembled from a `DiscreteArchitecture`: retained ops only,
/// no mixing weights. When built over a store already holding the mixed
/// network's parameters it reuses them by name, so a saturated mixed
/// network and its discretization compute with identical weights.
pub struct DiscreteNetwork {
    inner: Network,
    choices: DiscreteArchitecture,
}

impl DiscreteNetwork {
    pub fn build(
        spec: NetworkSpec,
        catalog: OpCatalog,
        choices: DiscreteArchitecture,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        temperature: f64,
        length_scale: f64,
        tau_inverse: f64,
        init_p: f64,
    ) -> Result<Self> {
        // Build (or rebind by name) the full parameterization, then
        // forward only through the retained ops. Unused candidates
        // simply never bind on the tape.
        let inner = Network::build(
            spec,
            catalog,
            store,
            rng,
            temperature,
            length_scale,
            tau_inverse,
            init_p,
        )?;
        let n_nodes = inner.spec.n_nodes;
        if choices.normal.len() != n_nodes || choices.reduce.len() != n_nodes {
            return Err(Error::BadNetworkSpec(format!(
                "architecture lists {}/{} nodes, spec has {n_nodes}",
                choices.normal.len(),
                choices.reduce.len()
            )));
        }
        for (t, node) in choices.normal.iter().chain(choices.reduce.iter()).enumerate() {
            for (pred, name) in node {
                if CandidateOp::from_name(name).is_none() {
                    return Err(Error::BadNetworkSpec(format!("unknown op `{name}` in node {t}")));
                }
                if *pred >= 2 + (t % n_nodes) {
                    return Err(Error::BadNetworkSpec(format!(
                        "predecessor {pred} invalid for node {}",
                        t % n_nodes
                    )));
                }
            }
        }
        Ok(DiscreteNetwork { inner, choices })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.inner.spec
    }

    pub fn dropout(&self) -> &DropoutParams {
        &self.inner.dropout
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.inner.sites
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, opts: FwdOptions) -> Result<(Tape, PassVars)> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, store, x, opts)?;
        Ok((tape, vars))
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        mut opts: FwdOptions,
    ) -> Result<PassVars> {
        let net = &self.inner;
        let mut pass = PassState {
            tape,
            store,
            bn_updates: Vec::new(),
            reg_sites: Vec::new(),
            bn_batch: opts.bn_batch_stats,
            update_running: opts.update_running,
        };
        let xin = pass.tape.constant(x.clone())?;
        let stem_w = pass.tape.param(store, net.stem_conv)?;
        let stem = pass.tape.conv2d(xin, stem_w, 1, 1, 1)?;
        let stem = pass.bn(stem, &net.stem_bn)?;

        let mut s0 = stem;
        let mut s1 = stem;
        let mut cell_nodes_all = Vec::new();
        let mut cell_outputs = Vec::new();
        for cell in net.cells.iter() {
            let p0 = pass.preprocess(s0, &cell.pre0)?;
            let p1 = pass.preprocess(s1, &cell.pre1)?;
            let choices = match cell.kind {
                CellKind::Normal => &self.choices.normal,
                CellKind::Reduction => &self.choices.reduce,
            };
            let mut states = vec![p0, p1];
            let mut nodes = Vec::new();
            for (t, edges) in cell.node_edges.iter().enumerate() {
                let mut acc: Option<Var> = None;
                for (pred, op_name) in &choices[t] {
                    let edge = edges
                        .iter()
                        .find(|e| e.from == *pred)
                        .expect("edge exists for predecessor");
                    let op = CandidateOp::from_name(op_name).expect("validated at build");
                    let op_idx = net.catalog.index_of(op).ok_or_else(|| {
                        Error::BadNetworkSpec(format!("op `{op_name}` not in catalog"))
                    })?;
                    let out =
                        pass.candidate(states[*pred], &edge.ops[op_idx], edge.stride, &net.sites, &mut opts.dropout, net)?;
                    acc = Some(match acc {
                        Some(a) => pass.tape.add(a, out)?,
                        None => out,
                    });
                }
                let node = match acc {
                    Some(a) => a,
                    // A node with zero retained pairs cannot arise from
                    // discretize (k >= 1), but keep the graph total.
                    None => {
                        let sx = pass.tape.value(p1).shape().to_vec();
                        pass.tape.zeros(&sx)?
                    }
                };
                states.push(node);
                nodes.push(node);
            }
            let out = pass.tape.concat_channels(&nodes)?;
            cell_nodes_all.push(nodes);
            cell_outputs.push(out);
            s0 = s1;
            s1 = out;
        }

        let pooled = pass.tape.global_avg_pool(s1)?;
        let features = match (net.classifier_site, &mut opts.dropout) {
            (Some(site_idx), DropoutMode::Sample(rng)) => {
                let info = &net.sites[site_idx];
                let logit = pass.tape.param(store, info.logit)?;
                let masked =
                    uncertainty::apply_concrete_dropout(pass.tape, pooled, logit, net.dropout.temperature, rng)?;
                pass.note_site(info, logit);
                masked
            }
            (Some(site_idx), DropoutMode::Bypass) => {
                let info = &net.sites[site_idx];
                let logit = pass.tape.param(store, info.logit)?;
                pass.note_site(info, logit);
                pooled
            }
            (None, _) => pooled,
        };
        let cw = pass.tape.param(store, net.classifier_w)?;
        let cb = pass.tape.param(store, net.classifier_b)?;
        let logits = pass.tape.matmul(features, cw)?;
        let logits = pass.tape.add_bias(logits, cb)?;
        let probs = pass.tape.softmax(logits)?;
        Ok(PassVars {
            logits,
            probs,
            bn_updates: pass.bn_updates,
            reg_sites: pass.reg_sites,
            cell_nodes: cell_nodes_all,
            cell_outputs,
        })
    }
}
