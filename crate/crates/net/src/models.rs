//! Assembled forecasting models behind one interface: a plain LSTM, a
//! concat-fusion ST-LSTM, parameter-generating recurrent variants (scaling
//! or full generation), and grid convolutional counterparts — plus
//! checkpointing.
//!
//! Every parameter is a named tensor in a sorted map. Initialization is
//! *name-keyed*: each tensor gets its own RNG stream derived from the seed
//! and its name, so two kinds sharing a parameter name (for example the
//! recurrent weights of the plain LSTM and of the scaling variant) start
//! from bit-identical values under the same seed. Generation heads start at
//! identity — scaling heads emit 1, bias heads emit 0, and full-generation
//! heads emit exactly the plain counterpart's initial weights — which makes
//! every parameter-generating model equal to its plain counterpart at
//! initialization; training then moves the heads away from identity.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::NetError;
use crate::init::{ones, uniform_fan_in, zeros};
use crate::layers::{
    count_params, generate, location_hyperst_conv_forward, spatial_embed, DenseVars, GateBias,
    HeadVars, LayerCounts, LayerKind, LstmGate, LstmStepGates,
};
use crate::{Padding, Real, Result, Tape, Tensor, Var};

/// Gate order shared by parameter naming and the step functions.
pub const GATES: [&str; 4] = ["forget", "input", "output", "cand"];

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Plain stacked LSTM; ignores spatial attributes entirely.
    Lstm,
    /// LSTM with the spatial embedding concatenated to the last hidden state
    /// before the output head (the conventional fusion baseline).
    StLstm,
    /// LSTM whose gate scalings and biases are generated per object.
    HyperstLstmD,
    /// LSTM whose gate weight matrices and biases are all generated.
    HyperstLstmG,
    /// Grid CNN with per-cell spatial embeddings concatenated along channels
    /// before the output head.
    StCnn,
    /// Grid CNN whose hidden channels get per-cell generated scalings.
    HyperstCnn,
}

impl ModelKind {
    /// Kinds that run the temporal module recurrently over per-object rows.
    pub fn is_recurrent(self) -> bool {
        !self.is_grid()
    }
    /// Kinds that run the temporal module convolutionally over a G×G grid.
    pub fn is_grid(self) -> bool {
        matches!(self, ModelKind::StCnn | ModelKind::HyperstCnn)
    }
    /// Kinds with a spatial embedding trunk.
    pub fn has_spatial(self) -> bool {
        !matches!(self, ModelKind::Lstm)
    }
    /// Kinds whose temporal parameters are (partly) generated.
    pub fn is_generating(self) -> bool {
        matches!(
            self,
            ModelKind::HyperstLstmD | ModelKind::HyperstLstmG | ModelKind::HyperstCnn
        )
    }
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::StLstm => "st-lstm",
            ModelKind::HyperstLstmD => "hyperst-lstm-d",
            ModelKind::HyperstLstmG => "hyperst-lstm-g",
            ModelKind::StCnn => "st-cnn",
            ModelKind::HyperstCnn => "hyperst-cnn",
        }
    }
}

/// Architecture description: widths, input dims, window and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Spatial trunk widths; the last entry is the embedding dim `d`.
    #[serde(default)]
    pub trunk: Vec<usize>,
    /// Temporal widths: hidden size per recurrent layer, or output channels
    /// per conv layer.
    pub temporal: Vec<usize>,
    pub d_s: usize,
    pub d_t: usize,
    pub d_l: usize,
    /// Input window length w.
    pub window: usize,
    /// Forecast horizon h (direct multi-step head).
    pub horizon: usize,
    /// Scaling variant: generate gate biases too (otherwise biases are
    /// learned, shared across objects).
    #[serde(default = "default_true")]
    pub generate_bias: bool,
    /// Conv kernel side for grid kinds.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_true() -> bool {
    true
}
fn default_kernel() -> usize {
    3
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temporal.is_empty() || self.temporal.iter().any(|&w| w == 0) {
            return Err(NetError::Config(
                "temporal widths must be non-empty and positive".into(),
            ));
        }
        if self.d_t == 0 || self.d_l == 0 || self.window == 0 || self.horizon == 0 {
            return Err(NetError::Config(
                "d_t, d_l, window, horizon must all be ≥ 1".into(),
            ));
        }
        if self.kind.has_spatial() {
            if self.trunk.is_empty() || self.trunk.iter().any(|&w| w == 0) {
                return Err(NetError::Config(format!(
                    "{} needs non-empty positive trunk widths",
                    self.kind.name()
                )));
            }
            if self.d_s == 0 {
                return Err(NetError::Config(format!(
                    "{} needs d_s ≥ 1",
                    self.kind.name()
                )));
            }
        }
        if self.kind.is_grid() && self.kernel == 0 {
            return Err(NetError::Config("kernel must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Embedding dimension `d` (0 for kinds without a spatial trunk).
    pub fn embed_dim(&self) -> usize {
        if self.kind.has_spatial() {
            *self.trunk.last().unwrap()
        } else {
            0
        }
    }

    /// Input size of temporal layer `l`.
    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            if self.kind.is_grid() {
                self.window * self.d_t
            } else {
                self.d_t
            }
        } else {
            self.temporal[l - 1]
        }
    }

    fn out_dim(&self) -> usize {
        self.horizon * self.d_l
    }
}

/// How each tensor starts.
enum InitRule {
    /// Uniform ±√(1/fan_in), keyed by the tensor's own name.
    FanIn(usize),
    Zeros,
    Ones,
    /// Drawn as if it were the named plain-counterpart tensor (same RNG
    /// stream), flattened — the identity start of full-generation heads.
    Mirror { source: String, fan_in: usize },
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: InitRule,
}

fn def(name: String, shape: Vec<usize>, init: InitRule) -> ParamDef {
    ParamDef { name, shape, init }
}

/// Every tensor a [`ModelSpec`] implies, in declaration order (the map sorts
/// them by name for storage; this order only groups the code).
fn param_defs(spec: &ModelSpec) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    if spec.kind.has_spatial() {
        let mut prev = spec.d_s;
        for (i, &width) in spec.trunk.iter().enumerate() {
            defs.push(def(
                format!("trunk.{i}.w"),
                vec![prev, width],
                InitRule::FanIn(prev),
            ));
            defs.push(def(format!("trunk.{i}.b"), vec![width], InitRule::Zeros));
            prev = width;
        }
    }
    let d = spec.embed_dim();
    match spec.kind {
        ModelKind::Lstm | ModelKind::StLstm => {
            for (l, &h) in spec.temporal.iter().enumerate() {
                let input = spec.layer_input(l);
                for gate in GATES {
                    defs.push(def(
                        format!("lstm.l{l}.{gate}.w"),
                        vec![input, h],
                        InitRule::FanIn(input),
                    ));
                    defs.push(def(
                        format!("lstm.l{l}.{gate}.u"),
                        vec![h, h],
                        InitRule::FanIn(h),
                    ));
                    defs.push(def(format!("lstm.l{l}.{gate}.b"), vec![h], InitRule::Zeros));
                }
            }
        }
        ModelKind::HyperstLstmD => {
            for (l, &h) in spec.temporal.iter().enumerate() {
                let input = spec.layer_input(l);
                for gate in GATES {
                    defs.push(def(
                        format!("lstm.l{l}.{gate}.w"),
                        vec![input, h],
                        InitRule::FanIn(input),
                    ));
                    defs.push(def(
                        format!("lstm.l{l}.{gate}.u"),
                        vec![h, h],
                        InitRule::FanIn(h),
                    ));
                    for (piece, size) in [("zx", input), ("zh", h)] {
                        defs.push(def(
                            format!("head.l{l}.{gate}.{piece}.w"),
                            vec![d, size],
                            InitRule::Zeros,
                        ));
                        defs.push(def(
                            format!("head.l{l}.{gate}.{piece}.b"),
                            vec![size],
                            InitRule::Ones,
                        ));
                    }
                    if spec.generate_bias {
                        defs.push(def(
                            format!("head.l{l}.{gate}.b.w"),
                            vec![d, h],
                            InitRule::Zeros,
                        ));
                        defs.push(def(
                            format!("head.l{l}.{gate}.b.b"),
                            vec![h],
                            InitRule::Zeros,
                        ));
                    } else {
                        defs.push(def(format!("lstm.l{l}.{gate}.b"), vec![h], InitRule::Zeros));
                    }
                }
            }
        }
        ModelKind::HyperstLstmG => {
            for (l, &h) in spec.temporal.iter().enumerate() {
                let input = spec.layer_input(l);
                for gate in GATES {
                    defs.push(def(
                        format!("head.l{l}.{gate}.w.w"),
                        vec![d, input * h],
                        InitRule::Zeros,
                    ));
                    defs.push(def(
                        format!("head.l{l}.{gate}.w.b"),
                        vec![input * h],
                        InitRule::Mirror {
                            source: format!("lstm.l{l}.{gate}.w"),
                            fan_in: input,
                        },
                    ));
                    defs.push(def(
                        format!("head.l{l}.{gate}.u.w"),
                        vec![d, h * h],
                        InitRule::Zeros,
                    ));
                    defs.push(def(
                        format!("head.l{l}.{gate}.u.b"),
                        vec![h * h],
                        InitRule::Mirror {
                            source: format!("lstm.l{l}.{gate}.u"),
                            fan_in: h,
                        },
                    ));
                    defs.push(def(
                        format!("head.l{l}.{gate}.b.w"),
                        vec![d, h],
                        InitRule::Zeros,
                    ));
                    defs.push(def(format!("head.l{l}.{gate}.b.b"), vec![h], InitRule::Zeros));
                }
            }
        }
        ModelKind::StCnn | ModelKind::HyperstCnn => {
            let k = spec.kernel;
            for (l, &c_out) in spec.temporal.iter().enumerate() {
                let c_in = spec.layer_input(l);
                defs.push(def(
                    format!("conv.l{l}.k"),
                    vec![c_out, c_in, k, k],
                    InitRule::FanIn(c_in * k * k),
                ));
                if spec.kind == ModelKind::HyperstCnn {
                    defs.push(def(
                        format!("head.conv.l{l}.z.w"),
                        vec![d, c_out],
                        InitRule::Zeros,
                    ));
                    defs.push(def(
                        format!("head.conv.l{l}.z.b"),
                        vec![c_out],
                        InitRule::Ones,
                    ));
                }
            }
        }
    }
    // Output head: linear over the last hidden state (recurrent kinds,
    // with the embedding concatenated for the fusion baseline) or a 1×1
    // conv over the last channels (grid kinds, bias-free).
    let last = *spec.temporal.last().unwrap();
    match spec.kind {
        ModelKind::Lstm | ModelKind::HyperstLstmD | ModelKind::HyperstLstmG => {
            defs.push(def(
                "out.w".into(),
                vec![last, spec.out_dim()],
                InitRule::FanIn(last),
            ));
            defs.push(def("out.b".into(), vec![spec.out_dim()], InitRule::Zeros));
        }
        ModelKind::StLstm => {
            defs.push(def(
                "out.w".into(),
                vec![last + d, spec.out_dim()],
                InitRule::FanIn(last + d),
            ));
            defs.push(def("out.b".into(), vec![spec.out_dim()], InitRule::Zeros));
        }
        ModelKind::StCnn => {
            defs.push(def(
                "out.k".into(),
                vec![spec.out_dim(), last + d, 1, 1],
                InitRule::FanIn(last + d),
            ));
        }
        ModelKind::HyperstCnn => {
            defs.push(def(
                "out.k".into(),
                vec![spec.out_dim(), last, 1, 1],
                InitRule::FanIn(last),
            ));
        }
    }
    defs
}

/// A built model: spec, seed, named parameters, and (after training) the
/// normalization statistics its inputs expect.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor>,
    pub normalizer: Option<Normalizer>,
}

/// Predictions for one batch: one matrix for batched kinds, one row per
/// sample for kinds that build a per-sample subgraph.
pub enum BatchPrediction {
    /// `[B, h·D_L]`.
    Single(Var),
    /// Each `[1, h·D_L]`.
    PerSample(Vec<Var>),
}

/// Constructs a model with name-keyed deterministic initialization.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut params = BTreeMap::new();
    for def in param_defs(spec) {
        let tensor = match def.init {
            InitRule::FanIn(fan_in) => uniform_fan_in(seed, &def.name, &def.shape, fan_in),
            InitRule::Zeros => zeros(&def.shape),
            InitRule::Ones => ones(&def.shape),
            InitRule::Mirror { source, fan_in } => {
                uniform_fan_in(seed, &source, &def.shape, fan_in)
            }
        };
        params.insert(def.name, tensor);
    }
    Ok(Model {
        spec: spec.clone(),
        seed,
        params,
        normalizer: None,
    })
}

fn row_of(t: &Tensor, i: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::from_fn(&[1, cols], |j| t.data()[i * cols + j]).unwrap()
}

impl Model {
    /// Registers every parameter on the tape, keyed by name.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect()
    }

    fn var(vars: &BTreeMap<String, Var>, name: &str) -> Var {
        *vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn trunk_vars(&self, vars: &BTreeMap<String, Var>) -> Vec<DenseVars> {
        (0..self.spec.trunk.len())
            .map(|i| DenseVars {
                w: Self::var(vars, &format!("trunk.{i}.w")),
                b: Self::var(vars, &format!("trunk.{i}.b")),
            })
            .collect()
    }

    fn head_vars(vars: &BTreeMap<String, Var>, prefix: &str) -> HeadVars {
        HeadVars {
            w: Self::var(vars, &format!("{prefix}.w")),
            b: Self::var(vars, &format!("{prefix}.b")),
        }
    }

    /// Embeds spatial rows `[B, D_s]` into `[B, d]`.
    fn embed(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, s: Var) -> Result<Var> {
        let trunk = self.trunk_vars(vars);
        spatial_embed(tape, s, &trunk)
    }

    fn plain_gates(&self, vars: &BTreeMap<String, Var>, l: usize) -> LstmStepGates {
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            gates.push(LstmGate {
                w: Self::var(vars, &format!("lstm.l{l}.{gate}.w")),
                u: Self::var(vars, &format!("lstm.l{l}.{gate}.u")),
                zx: None,
                zh: None,
                bias: GateBias::Shared(Self::var(vars, &format!("lstm.l{l}.{gate}.b"))),
            });
        }
        LstmStepGates {
            forget: gates[0],
            input: gates[1],
            output: gates[2],
            cand: gates[3],
        }
    }

    /// Gates of the scaling variant: learned W/U, generated scalings (and
    /// bias), one row per object in the batch.
    fn scaling_gates(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        l: usize,
        embed: Var,
    ) -> Result<LstmStepGates> {
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let zx_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.zx"));
            let zh_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.zh"));
            let zx = generate(tape, embed, &zx_head)?;
            let zh = generate(tape, embed, &zh_head)?;
            let bias = if self.spec.generate_bias {
                let b_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.b"));
                GateBias::PerRow(generate(tape, embed, &b_head)?)
            } else {
                GateBias::Shared(Self::var(vars, &format!("lstm.l{l}.{gate}.b")))
            };
            gates.push(LstmGate {
                w: Self::var(vars, &format!("lstm.l{l}.{gate}.w")),
                u: Self::var(vars, &format!("lstm.l{l}.{gate}.u")),
                zx: Some(zx),
                zh: Some(zh),
                bias,
            });
        }
        Ok(LstmStepGates {
            forget: gates[0],
            input: gates[1],
            output: gates[2],
            cand: gates[3],
        })
    }

    /// Gates of the full-generation variant for ONE object (embed `[1, d]`):
    /// every gate tensor is emitted by a head and reshaped into place.
    fn generated_gates(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        l: usize,
        embed: Var,
    ) -> Result<LstmStepGates> {
        let input = self.spec.layer_input(l);
        let h = self.spec.temporal[l];
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let w_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.w"));
            let u_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.u"));
            let b_head = Self::head_vars(vars, &format!("head.l{l}.{gate}.b"));
            let w_flat = generate(tape, embed, &w_head)?;
            let u_flat = generate(tape, embed, &u_head)?;
            let b = generate(tape, embed, &b_head)?;
            gates.push(LstmGate {
                w: tape.reshape(w_flat, &[input, h])?,
                u: tape.reshape(u_flat, &[h, h])?,
                zx: None,
                zh: None,
                bias: GateBias::PerRow(b),
            });
        }
        Ok(LstmStepGates {
            forget: gates[0],
            input: gates[1],
            output: gates[2],
            cand: gates[3],
        })
    }

    /// Runs the stacked recurrence and returns the last step's top hidden
    /// state `[B, H_last]`.
    fn run_stack(
        &self,
        tape: &mut Tape,
        xs: &[Var],
        batch: usize,
        gates_per_layer: &[LstmStepGates],
    ) -> Result<Var> {
        let mut seq = xs.to_vec();
        for (l, gates) in gates_per_layer.iter().enumerate() {
            let h_dim = self.spec.temporal[l];
            let mut h = tape.leaf(Tensor::zeros(&[batch, h_dim])?);
            let mut c = tape.leaf(Tensor::zeros(&[batch, h_dim])?);
            let mut next = Vec::with_capacity(seq.len());
            for &x in &seq {
                let (h2, c2) = crate::layers::lstm_step(tape, x, h, c, gates)?;
                h = h2;
                c = c2;
                next.push(h2);
            }
            seq = next;
        }
        Ok(*seq.last().unwrap())
    }

    /// Forward over a batch of per-object windows. `s` is `[B, D_s]`
    /// (ignored by the plain LSTM), `steps` holds the window step by step,
    /// each `[B, D_T]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        s: &Tensor,
        steps: &[Tensor],
    ) -> Result<BatchPrediction> {
        if !self.spec.kind.is_recurrent() {
            return Err(NetError::Config(format!(
                "{} consumes grids; use forward_grid",
                self.spec.kind.name()
            )));
        }
        if steps.len() != self.spec.window {
            return Err(NetError::Shape {
                symbol: "window".into(),
                expected: vec![self.spec.window],
                got: vec![steps.len()],
            });
        }
        let batch = steps[0].shape()[0];
        for (i, t) in steps.iter().enumerate() {
            if t.shape() != [batch, self.spec.d_t] {
                return Err(NetError::Shape {
                    symbol: format!("steps[{i}]"),
                    expected: vec![batch, self.spec.d_t],
                    got: t.shape().to_vec(),
                });
            }
        }
        if self.spec.kind.has_spatial() && s.shape() != [batch, self.spec.d_s] {
            return Err(NetError::Shape {
                symbol: "s".into(),
                expected: vec![batch, self.spec.d_s],
                got: s.shape().to_vec(),
            });
        }

        match self.spec.kind {
            ModelKind::Lstm | ModelKind::StLstm | ModelKind::HyperstLstmD => {
                let xs: Vec<Var> = steps.iter().map(|t| tape.leaf(t.clone())).collect();
                let embed = if self.spec.kind.has_spatial() {
                    let sv = tape.leaf(s.clone());
                    Some(self.embed(tape, vars, sv)?)
                } else {
                    None
                };
                let gates: Vec<LstmStepGates> = (0..self.spec.temporal.len())
                    .map(|l| match self.spec.kind {
                        ModelKind::HyperstLstmD => {
                            self.scaling_gates(tape, vars, l, embed.unwrap())
                        }
                        _ => Ok(self.plain_gates(vars, l)),
                    })
                    .collect::<Result<_>>()?;
                let mut last = self.run_stack(tape, &xs, batch, &gates)?;
                if self.spec.kind == ModelKind::StLstm {
                    last = tape.concat_last(last, embed.unwrap())?;
                }
                let y = tape.matmul(last, Self::var(vars, "out.w"))?;
                let y = tape.add_row_vec(y, Self::var(vars, "out.b"))?;
                Ok(BatchPrediction::Single(y))
            }
            ModelKind::HyperstLstmG => {
                // Each object owns a different generated weight matrix, so
                // the graph is built per sample.
                let mut preds = Vec::with_capacity(batch);
                for i in 0..batch {
                    let sv = tape.leaf(row_of(s, i));
                    let embed = self.embed(tape, vars, sv)?;
                    let gates: Vec<LstmStepGates> = (0..self.spec.temporal.len())
                        .map(|l| self.generated_gates(tape, vars, l, embed))
                        .collect::<Result<_>>()?;
                    let xs: Vec<Var> = steps.iter().map(|t| tape.leaf(row_of(t, i))).collect();
                    let last = self.run_stack(tape, &xs, 1, &gates)?;
                    let y = tape.matmul(last, Self::var(vars, "out.w"))?;
                    let y = tape.add_row_vec(y, Self::var(vars, "out.b"))?;
                    preds.push(y);
                }
                Ok(BatchPrediction::PerSample(preds))
            }
            _ => unreachable!("grid kinds rejected above"),
        }
    }

    /// Forward over one grid sample. `s_cells` is `[G², D_s]` (cell
    /// attributes in row-major grid order), `x` is `[w·D_T, G, G]`. Returns
    /// channels `[h·D_L, G, G]` on the tape.
    pub fn forward_grid(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        s_cells: &Tensor,
        x: &Tensor,
    ) -> Result<Var> {
        if !self.spec.kind.is_grid() {
            return Err(NetError::Config(format!(
                "{} consumes windows; use forward_batch",
                self.spec.kind.name()
            )));
        }
        if x.rank() != 3 || x.shape()[1] != x.shape()[2] {
            return Err(NetError::Shape {
                symbol: "grid input".into(),
                expected: vec![self.spec.window * self.spec.d_t, 0, 0],
                got: x.shape().to_vec(),
            });
        }
        let g = x.shape()[1];
        if x.shape()[0] != self.spec.window * self.spec.d_t {
            return Err(NetError::Shape {
                symbol: "grid channels".into(),
                expected: vec![self.spec.window * self.spec.d_t, g, g],
                got: x.shape().to_vec(),
            });
        }
        if s_cells.shape() != [g * g, self.spec.d_s] {
            return Err(NetError::Shape {
                symbol: "cell attributes".into(),
                expected: vec![g * g, self.spec.d_s],
                got: s_cells.shape().to_vec(),
            });
        }

        let sv = tape.leaf(s_cells.clone());
        let embed = self.embed(tape, vars, sv)?;
        let mut hidden = tape.leaf(x.clone());
        for l in 0..self.spec.temporal.len() {
            let kernel = Self::var(vars, &format!("conv.l{l}.k"));
            hidden = match self.spec.kind {
                ModelKind::StCnn => tape.conv2d(hidden, kernel, Padding::Same)?,
                ModelKind::HyperstCnn => {
                    let z_head = Self::head_vars(vars, &format!("head.conv.l{l}.z"));
                    let z_cells = generate(tape, embed, &z_head)?;
                    location_hyperst_conv_forward(tape, hidden, z_cells, kernel, Padding::Same)?
                }
                _ => unreachable!(),
            };
            hidden = tape.tanh(hidden)?;
        }
        if self.spec.kind == ModelKind::StCnn {
            let e_chan = tape.channels_from_cells(embed, g, g)?;
            hidden = tape.concat_channels(hidden, e_chan)?;
        }
        Ok(tape.conv2d(hidden, Self::var(vars, "out.k"), Padding::Same)?)
    }

    /// Forecasts one object (recurrent kinds: `s [1, D_s]`, `window
    /// [w, D_T]`, returns `[h, D_L]`) or one grid (grid kinds: `s [G², D_s]`,
    /// `window [w·D_T, G, G]`, returns `[G², h·D_L]`).
    pub fn forecast(&self, s: &Tensor, window: &Tensor) -> Result<Tensor> {
        if !s.all_finite() || !window.all_finite() {
            return Err(NetError::Data("forecast input contains NaN/Inf".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        if self.spec.kind.is_recurrent() {
            if window.shape() != [self.spec.window, self.spec.d_t] {
                return Err(NetError::Shape {
                    symbol: "window".into(),
                    expected: vec![self.spec.window, self.spec.d_t],
                    got: window.shape().to_vec(),
                });
            }
            let steps: Vec<Tensor> = (0..self.spec.window)
                .map(|t| row_of(window, t))
                .collect();
            let pred = self.forward_batch(&mut tape, &vars, s, &steps)?;
            let row = match pred {
                BatchPrediction::Single(v) => tape.value(v).data().to_vec(),
                BatchPrediction::PerSample(rows) => tape.value(rows[0]).data().to_vec(),
            };
            Ok(Tensor::from_vec(&[self.spec.horizon, self.spec.d_l], row)?)
        } else {
            let out = self.forward_grid(&mut tape, &vars, s, window)?;
            let val = tape.value(out);
            let g = val.shape()[1];
            let hd = self.spec.out_dim();
            Ok(Tensor::from_fn(&[g * g, hd], |i| {
                val.data()[(i % hd) * g * g + i / hd]
            })?)
        }
    }

    /// The conventional-fusion forecast: identical to [`Model::forecast`]
    /// but only for the concat-fusion baselines.
    pub fn st_fusion_forecast(&self, s: &Tensor, window: &Tensor) -> Result<Tensor> {
        if !matches!(self.spec.kind, ModelKind::StLstm | ModelKind::StCnn) {
            return Err(NetError::Config(format!(
                "st_fusion_forecast needs a concat-fusion kind, got {}",
                self.spec.kind.name()
            )));
        }
        self.forecast(s, window)
    }

    /// Embeds every object: `[N, D_s] → [N, d]`.
    pub fn export_embeddings(&self, spatial: &Tensor) -> Result<Tensor> {
        if !self.spec.kind.has_spatial() {
            return Err(NetError::Config(format!(
                "{} has no spatial trunk to export",
                self.spec.kind.name()
            )));
        }
        if spatial.rank() != 2 || spatial.shape()[1] != self.spec.d_s {
            return Err(NetError::Shape {
                symbol: "spatial attributes".into(),
                expected: vec![0, self.spec.d_s],
                got: spatial.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.leaf(spatial.clone());
        let e = self.embed(&mut tape, &vars, sv)?;
        Ok(tape.value(e).clone())
    }

    /// Parameter accounting from the closed forms (not from the stored map).
    pub fn counts(&self) -> ModelCounts {
        let spec = &self.spec;
        let d = spec.embed_dim();
        let mut c = ModelCounts::default();
        if spec.kind.has_spatial() {
            let mut prev = spec.d_s;
            for &w in &spec.trunk {
                c.trunk += prev * w + w;
                prev = w;
            }
        }
        fn add_layer(c: &mut ModelCounts, counts: LayerCounts, bias_extra: usize) {
            c.temporal_learned += counts.learned;
            c.hypernet += counts.hypernet;
            c.head_bias += bias_extra;
            c.generated_per_object += counts.generated_per_object;
        }
        for (l, &h) in spec.temporal.iter().enumerate() {
            let input = spec.layer_input(l);
            match spec.kind {
                ModelKind::Lstm | ModelKind::StLstm => {
                    c.temporal_learned += 4 * (input * h + h * h + h);
                }
                ModelKind::HyperstLstmD => {
                    for _gate in GATES {
                        // Input path: scaled dense without its own bias head.
                        add_layer(
                            &mut c,
                            count_params(&LayerKind::Dense {
                                d,
                                n_in: input,
                                n_out: h,
                                bias_head: false,
                            }),
                            input,
                        );
                        // Hidden path carries the gate bias when generated.
                        add_layer(
                            &mut c,
                            count_params(&LayerKind::Dense {
                                d,
                                n_in: h,
                                n_out: h,
                                bias_head: spec.generate_bias,
                            }),
                            h + if spec.generate_bias { h } else { 0 },
                        );
                        if !spec.generate_bias {
                            c.temporal_learned += h;
                        }
                    }
                }
                ModelKind::HyperstLstmG => {
                    for _gate in GATES {
                        for n_theta in [input * h, h * h, h] {
                            add_layer(
                                &mut c,
                                count_params(&LayerKind::General { d, n_theta }),
                                n_theta,
                            );
                        }
                    }
                }
                ModelKind::StCnn => {
                    c.temporal_learned += h * input * spec.kernel * spec.kernel;
                }
                ModelKind::HyperstCnn => {
                    add_layer(
                        &mut c,
                        count_params(&LayerKind::Conv {
                            d,
                            c_in: input,
                            c_out: h,
                            kh: spec.kernel,
                            kw: spec.kernel,
                        }),
                        h,
                    );
                }
            }
        }
        let last = *spec.temporal.last().unwrap();
        c.output_head = match spec.kind {
            ModelKind::Lstm | ModelKind::HyperstLstmD | ModelKind::HyperstLstmG => {
                last * spec.out_dim() + spec.out_dim()
            }
            ModelKind::StLstm => (last + d) * spec.out_dim() + spec.out_dim(),
            ModelKind::StCnn => spec.out_dim() * (last + d),
            ModelKind::HyperstCnn => spec.out_dim() * last,
        };
        c
    }

    /// Total stored scalars, straight from the parameter map.
    pub fn stored_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Closed-form parameter breakdown of a whole model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelCounts {
    pub trunk: usize,
    /// Learned temporal-module tensors (shared across objects).
    pub temporal_learned: usize,
    /// Generation-head weight matrices (the closed-form hypernetwork cost).
    pub hypernet: usize,
    /// Generation-head bias vectors (start states; on top of the closed
    /// forms).
    pub head_bias: usize,
    pub output_head: usize,
    /// Values generated per object at forward time.
    pub generated_per_object: usize,
}

impl ModelCounts {
    /// Every scalar a checkpoint stores.
    pub fn stored_total(&self) -> usize {
        self.trunk + self.temporal_learned + self.hypernet + self.head_bias + self.output_head
    }
}

// ---------------------------------------------------------------------------
// Checkpointing: manifest.json + weights.bin
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    spec: ModelSpec,
    seed: u64,
    normalizer: Option<Normalizer>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    /// Writes `manifest.json` and `weights.bin` (concatenated little-endian
    /// f64, row-major, in manifest order) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for (name, tensor) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            normalizer: self.normalizer.clone(),
            tensors,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(dir.join("weights.bin"), blob)?;
        Ok(())
    }

    /// Loads a checkpoint, validating the manifest against the shapes the
    /// spec implies and the blob against the manifest.
    pub fn load(dir: &Path) -> Result<Model> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| NetError::Corrupt(format!("{}: {e}", manifest_path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| NetError::Corrupt(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(NetError::Corrupt(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        manifest.spec.validate()?;

        let mut expected: Vec<(String, Vec<usize>)> = param_defs(&manifest.spec)
            .into_iter()
            .map(|d| (d.name, d.shape))
            .collect();
        expected.sort();
        let listed: Vec<(String, Vec<usize>)> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expected != listed {
            return Err(NetError::Corrupt(
                "manifest tensor table does not match the model spec".into(),
            ));
        }

        let blob_path = dir.join("weights.bin");
        let mut blob = Vec::new();
        std::fs::File::open(&blob_path)
            .and_then(|mut f| f.read_to_end(&mut blob))
            .map_err(|e| NetError::Corrupt(format!("{}: {e}", blob_path.display())))?;
        let total: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if blob.len() != total * 8 {
            return Err(NetError::Corrupt(format!(
                "weights.bin holds {} bytes, manifest implies {}",
                blob.len(),
                total * 8
            )));
        }

        let mut params = BTreeMap::new();
        let mut cursor = 0u64;
        for entry in &manifest.tensors {
            if entry.offset != cursor {
                return Err(NetError::Corrupt(format!(
                    "tensor {} at offset {}, expected {cursor}",
                    entry.name, entry.offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let data: Vec<Real> = (0..numel)
                .map(|i| {
                    let at = start + i * 8;
                    Real::from_le_bytes(blob[at..at + 8].try_into().unwrap())
                })
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Corrupt(format!(
                    "tensor {} contains non-finite values",
                    entry.name
                )));
            }
            params.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
            cursor += numel as u64 * 8;
        }
        Ok(Model {
            spec: manifest.spec,
            seed: manifest.seed,
            params,
            normalizer: manifest.normalizer,
        })
    }
}

/// Writes an embedding table as CSV with header `object_id,e0..e{d-1}`.
pub fn write_embeddings_csv(path: &Path, embeddings: &Tensor) -> Result<()> {
    let (n, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["object_id".to_string()];
    header.extend((0..d).map(|c| format!("e{c}")));
    w.write_record(&header)?;
    for o in 0..n {
        let mut rec = vec![o.to_string()];
        rec.extend((0..d).map(|c| format!("{}", embeddings.data()[o * d + c])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            trunk: vec![6, 3],
            temporal: vec![5, 4],
            d_s: 3,
            d_t: 2,
            d_l: 1,
            window: 4,
            horizon: 2,
            generate_bias: true,
            kernel: 3,
        }
    }

    fn pseudo(shape: &[usize], salt: u64) -> Tensor {
        Tensor::from_fn(shape, |i| {
            let k = (i as u64).wrapping_add(salt).wrapping_mul(6364136223846793005);
            ((k >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(&spec(ModelKind::HyperstLstmD), 9).unwrap();
        let b = build(&spec(ModelKind::HyperstLstmD), 9).unwrap();
        assert_eq!(a.params, b.params);
        let c = build(&spec(ModelKind::HyperstLstmD), 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = spec(ModelKind::Lstm);
        s.temporal.clear();
        assert!(build(&s, 1).is_err());
        let mut s = spec(ModelKind::StLstm);
        s.trunk.clear();
        assert!(build(&s, 1).is_err());
        let mut s = spec(ModelKind::HyperstLstmD);
        s.horizon = 0;
        assert!(build(&s, 1).is_err());
    }

    fn demo_inputs(sp: &ModelSpec) -> (Tensor, Tensor) {
        let s = pseudo(&[1, sp.d_s], 1);
        let window = pseudo(&[sp.window, sp.d_t], 2);
        (s, window)
    }

    #[test]
    fn scaling_variant_equals_plain_lstm_at_init() {
        let seed = 21;
        let plain = build(&spec(ModelKind::Lstm), seed).unwrap();
        let hyper = build(&spec(ModelKind::HyperstLstmD), seed).unwrap();
        let (s, window) = demo_inputs(&plain.spec);
        let a = plain.forecast(&s, &window).unwrap();
        let b = hyper.forecast(&s, &window).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn full_generation_variant_equals_plain_lstm_at_init() {
        let seed = 22;
        let plain = build(&spec(ModelKind::Lstm), seed).unwrap();
        let hyper = build(&spec(ModelKind::HyperstLstmG), seed).unwrap();
        let (s, window) = demo_inputs(&plain.spec);
        let a = plain.forecast(&s, &window).unwrap();
        let b = hyper.forecast(&s, &window).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn one_unit_lstm_matches_scalar_hand_computation() {
        let sp = ModelSpec {
            kind: ModelKind::Lstm,
            trunk: vec![],
            temporal: vec![1],
            d_s: 1,
            d_t: 1,
            d_l: 1,
            window: 2,
            horizon: 1,
            generate_bias: true,
            kernel: 3,
        };
        let mut model = build(&sp, 0).unwrap();
        // Pin every scalar by hand.
        let put = |m: &mut Model, name: &str, shape: &[usize], v: &[f64]| {
            m.params
                .insert(name.into(), Tensor::from_vec(shape, v.to_vec()).unwrap());
        };
        let (wf, wi, wo, wc) = (0.5, -0.3, 0.8, 1.1);
        let (uf, ui, uo, uc) = (0.2, 0.4, -0.6, 0.9);
        let (bf, bi, bo, bc) = (0.1, -0.2, 0.3, 0.0);
        for (gate, w, u, b) in [
            ("forget", wf, uf, bf),
            ("input", wi, ui, bi),
            ("output", wo, uo, bo),
            ("cand", wc, uc, bc),
        ] {
            put(&mut model, &format!("lstm.l0.{gate}.w"), &[1, 1], &[w]);
            put(&mut model, &format!("lstm.l0.{gate}.u"), &[1, 1], &[u]);
            put(&mut model, &format!("lstm.l0.{gate}.b"), &[1], &[b]);
        }
        put(&mut model, "out.w", &[1, 1], &[2.0]);
        put(&mut model, "out.b", &[1], &[-0.5]);

        let (x1, x2) = (0.7, -0.4);
        let window = Tensor::from_vec(&[2, 1], vec![x1, x2]).unwrap();
        let s = Tensor::zeros(&[1, 1]).unwrap();
        let got = model.forecast(&s, &window).unwrap();

        // Scalar recurrence, written out step by step.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for x in [x1, x2] {
            let f = sig(wf * x + uf * h + bf);
            let i = sig(wi * x + ui * h + bi);
            let o = sig(wo * x + uo * h + bo);
            let cand = (wc * x + uc * h + bc).tanh();
            c = f * c + i * cand;
            h = o * c.tanh();
        }
        let want = 2.0 * h - 0.5;
        assert!((got.data()[0] - want).abs() < 1e-14, "{} vs {want}", got.data()[0]);
    }

    #[test]
    fn equal_objects_get_equal_predictions() {
        let model = build(&spec(ModelKind::HyperstLstmD), 3).unwrap();
        let sp = &model.spec;
        let s_row = pseudo(&[1, sp.d_s], 7);
        let s = Tensor::from_fn(&[2, sp.d_s], |i| s_row.data()[i % sp.d_s]).unwrap();
        let steps: Vec<Tensor> = (0..sp.window)
            .map(|t| {
                let row = pseudo(&[1, sp.d_t], 100 + t as u64);
                Tensor::from_fn(&[2, sp.d_t], |i| row.data()[i % sp.d_t]).unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pred = model.forward_batch(&mut tape, &vars, &s, &steps).unwrap();
        let y = match pred {
            BatchPrediction::Single(v) => tape.value(v),
            _ => unreachable!(),
        };
        let cols = y.shape()[1];
        assert_eq!(&y.data()[..cols], &y.data()[cols..]);
    }

    #[test]
    fn fusion_concat_widens_output_head() {
        let model = build(&spec(ModelKind::StLstm), 5).unwrap();
        let h_last = *model.spec.temporal.last().unwrap();
        let d = model.spec.embed_dim();
        assert_eq!(
            model.params["out.w"].shape(),
            &[h_last + d, model.spec.out_dim()]
        );
    }

    #[test]
    fn zeroed_trunk_reduces_fusion_to_plain_lstm() {
        let seed = 8;
        let mut fused = build(&spec(ModelKind::StLstm), seed).unwrap();
        for i in 0..fused.spec.trunk.len() {
            for piece in ["w", "b"] {
                let name = format!("trunk.{i}.{piece}");
                let shape = fused.params[&name].shape().to_vec();
                fused
                    .params
                    .insert(name, Tensor::zeros(&shape).unwrap());
            }
        }
        // Plain counterpart sharing the recurrent tensors and the head rows
        // that see the hidden state.
        let mut plain = build(&spec(ModelKind::Lstm), seed).unwrap();
        for (name, tensor) in &fused.params {
            if name.starts_with("lstm.") {
                plain.params.insert(name.clone(), tensor.clone());
            }
        }
        let h_last = *plain.spec.temporal.last().unwrap();
        let out_dim = plain.spec.out_dim();
        let fused_w = &fused.params["out.w"];
        let top = Tensor::from_fn(&[h_last, out_dim], |i| fused_w.data()[i]).unwrap();
        plain.params.insert("out.w".into(), top);
        plain
            .params
            .insert("out.b".into(), fused.params["out.b"].clone());

        let (s, window) = demo_inputs(&fused.spec);
        let a = fused.st_fusion_forecast(&s, &window).unwrap();
        let b = plain.forecast(&s, &window).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fusion_matches_two_branch_reference() {
        let model = build(&spec(ModelKind::StLstm), 13).unwrap();
        let (s, window) = demo_inputs(&model.spec);
        let got = model.st_fusion_forecast(&s, &window).unwrap();

        // Reference: compose the two branches explicitly from the same
        // tensors — embed, run the recurrence, concat, head.
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let sv = tape.leaf(s.clone());
        let e = model.embed(&mut tape, &vars, sv).unwrap();
        let xs: Vec<Var> = (0..model.spec.window)
            .map(|t| tape.leaf(row_of(&window, t)))
            .collect();
        let gates: Vec<LstmStepGates> = (0..model.spec.temporal.len())
            .map(|l| model.plain_gates(&vars, l))
            .collect();
        let last = model.run_stack(&mut tape, &xs, 1, &gates).unwrap();
        let cat = tape.concat_last(last, e).unwrap();
        let y = tape.matmul(cat, vars["out.w"]).unwrap();
        let y = tape.add_row_vec(y, vars["out.b"]).unwrap();
        assert_eq!(got.data(), tape.value(y).data());
    }

    #[test]
    fn fusion_entry_point_rejects_other_kinds() {
        let model = build(&spec(ModelKind::HyperstLstmD), 1).unwrap();
        let (s, window) = demo_inputs(&model.spec);
        assert!(matches!(
            model.st_fusion_forecast(&s, &window),
            Err(NetError::Config(_))
        ));
    }

    #[test]
    fn forecast_rejects_nan_input() {
        let model = build(&spec(ModelKind::Lstm), 2).unwrap();
        let (s, mut window) = demo_inputs(&model.spec);
        let mut data = window.data().to_vec();
        data[1] = f64::NAN;
        window = Tensor::from_vec(window.shape(), data).unwrap();
        assert!(matches!(
            model.forecast(&s, &window),
            Err(NetError::Data(_))
        ));
    }

    fn grid_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            trunk: vec![4, 2],
            temporal: vec![3, 2],
            d_s: 3,
            d_t: 1,
            d_l: 1,
            window: 4,
            horizon: 2,
            generate_bias: true,
            kernel: 3,
        }
    }

    #[test]
    fn grid_forecast_has_cell_rows() {
        let model = build(&grid_spec(ModelKind::StCnn), 4).unwrap();
        let g = 3;
        let s = pseudo(&[g * g, 3], 50);
        let x = pseudo(&[4, g, g], 51);
        let out = model.forecast(&s, &x).unwrap();
        assert_eq!(out.shape(), &[g * g, 2]);

        // Rows are the channel fibers of the grid output.
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let v = model.forward_grid(&mut tape, &vars, &s, &x).unwrap();
        let chan = tape.value(v);
        for cell in 0..g * g {
            for j in 0..2 {
                assert_eq!(out.data()[cell * 2 + j], chan.data()[j * g * g + cell]);
            }
        }
    }

    #[test]
    fn location_scaling_cnn_equals_plain_conv_stack_at_init() {
        let seed = 17;
        let model = build(&grid_spec(ModelKind::HyperstCnn), seed).unwrap();
        let g = 3;
        let s = pseudo(&[g * g, 3], 60);
        let x = pseudo(&[4, g, g], 61);
        let got = model.forecast(&s, &x).unwrap();

        // Plain stack from the same kernels (scalings start at 1).
        let mut tape = Tape::new();
        let mut hidden = tape.leaf(x);
        for l in 0..2 {
            let k = tape.leaf(model.params[&format!("conv.l{l}.k")].clone());
            hidden = tape.conv2d(hidden, k, Padding::Same).unwrap();
            hidden = tape.tanh(hidden).unwrap();
        }
        let k = tape.leaf(model.params["out.k"].clone());
        let out = tape.conv2d(hidden, k, Padding::Same).unwrap();
        let want = tape.value(out);
        for cell in 0..g * g {
            for j in 0..2 {
                assert_eq!(got.data()[cell * 2 + j], want.data()[j * g * g + cell]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = build(&spec(ModelKind::HyperstLstmD), 33).unwrap();
        model.normalizer = Some(Normalizer {
            t_mean: vec![0.5, -1.0],
            t_std: vec![2.0, 0.25],
            l_mean: vec![3.0],
            l_std: vec![1.5],
            degenerate: vec![],
        });
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(model, back);

        let (s, window) = demo_inputs(&model.spec);
        let a = model.forecast(&s, &window).unwrap();
        let b = back.forecast(&s, &window).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn checkpoint_rejects_truncated_blob() {
        let model = build(&spec(ModelKind::Lstm), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let blob_path = dir.path().join("weights.bin");
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            Model::load(dir.path()),
            Err(NetError::Corrupt(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_doctored_manifest() {
        let model = build(&spec(ModelKind::Lstm), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&p).unwrap();
        // Grow one declared shape: every later offset (and the blob length)
        // stops matching.
        let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        let dim = &mut manifest["tensors"][0]["shape"][0];
        *dim = serde_json::json!(dim.as_u64().unwrap() + 1);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        assert!(Model::load(dir.path()).is_err());
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let model = build(&spec(ModelKind::HyperstLstmG), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(
            manifest["tensors"].as_array().unwrap().len(),
            model.params.len()
        );
    }

    #[test]
    fn embeddings_have_one_row_per_object() {
        let model = build(&spec(ModelKind::StLstm), 6).unwrap();
        let s = pseudo(&[7, 3], 70);
        let e = model.export_embeddings(&s).unwrap();
        assert_eq!(e.shape(), &[7, model.spec.embed_dim()]);

        // Identical rows embed identically.
        let twin = Tensor::from_fn(&[2, 3], |i| s.data()[i % 3]).unwrap();
        let et = model.export_embeddings(&twin).unwrap();
        let d = model.spec.embed_dim();
        assert_eq!(&et.data()[..d], &et.data()[d..]);

        let plain = build(&spec(ModelKind::Lstm), 6).unwrap();
        assert!(plain.export_embeddings(&s).is_err());
    }

    #[test]
    fn zero_weight_trunk_embeds_to_final_bias() {
        let mut model = build(&spec(ModelKind::StLstm), 6).unwrap();
        for i in 0..model.spec.trunk.len() {
            let name = format!("trunk.{i}.w");
            let shape = model.params[&name].shape().to_vec();
            model.params.insert(name, Tensor::zeros(&shape).unwrap());
        }
        let bias = pseudo(&[model.spec.embed_dim()], 71);
        model
            .params
            .insert(format!("trunk.{}.b", model.spec.trunk.len() - 1), bias.clone());
        let s = pseudo(&[4, 3], 72);
        let e = model.export_embeddings(&s).unwrap();
        let d = model.spec.embed_dim();
        for o in 0..4 {
            // tanh of the earlier (zero) stages keeps zeros, so the final
            // stage passes its bias through untouched.
            assert_eq!(&e.data()[o * d..(o + 1) * d], bias.data());
        }
    }

    #[test]
    fn counts_match_stored_parameters_for_every_kind() {
        for kind in [
            ModelKind::Lstm,
            ModelKind::StLstm,
            ModelKind::HyperstLstmD,
            ModelKind::HyperstLstmG,
            ModelKind::StCnn,
            ModelKind::HyperstCnn,
        ] {
            let sp = if kind.is_grid() {
                grid_spec(kind)
            } else {
                spec(kind)
            };
            let model = build(&sp, 1).unwrap();
            assert_eq!(
                model.stored_params(),
                model.counts().stored_total(),
                "{}",
                kind.name()
            );
        }
    }

    #[test]
    fn wide_config_counts_match_per_layer_closed_forms() {
        let sp = ModelSpec {
            kind: ModelKind::HyperstLstmD,
            trunk: vec![16, 8, 4],
            temporal: vec![32, 32],
            d_s: 8,
            d_t: 2,
            d_l: 1,
            window: 6,
            horizon: 3,
            generate_bias: true,
            kernel: 3,
        };
        let model = build(&sp, 2).unwrap();
        let c = model.counts();

        // Sum the per-layer closed forms by hand: per gate, an input-path
        // scaled dense and a hidden-path scaled dense with a bias head.
        let d = 4;
        let mut learned = 0;
        let mut hyper = 0;
        for (input, h) in [(2, 32), (32, 32)] {
            learned += 4 * (input * h + h * h);
            hyper += 4 * (d * input + d * h + d * h);
        }
        assert_eq!(c.temporal_learned, learned);
        assert_eq!(c.hypernet, hyper);
        assert_eq!(model.stored_params(), c.stored_total());
    }

    #[test]
    fn full_generation_costs_more_hypernet_than_scaling() {
        let d_model = build(&spec(ModelKind::HyperstLstmD), 1).unwrap();
        let g_model = build(&spec(ModelKind::HyperstLstmG), 1).unwrap();
        assert!(g_model.counts().hypernet > d_model.counts().hypernet);
    }

    #[test]
    fn embeddings_csv_round_trips_row_count() {
        let model = build(&spec(ModelKind::StLstm), 6).unwrap();
        let s = pseudo(&[5, 3], 73);
        let e = model.export_embeddings(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        write_embeddings_csv(&path, &e).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "object_id,e0,e1,e2");
        assert_eq!(lines.count(), 5);
    }
}
