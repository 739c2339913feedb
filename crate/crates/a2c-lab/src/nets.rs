//! Actor-critic network: a shared feature extractor feeding a softmax policy
//! head and a scalar value head, plus the Adam optimizer and checkpointing.
//!
//! The three parameter groups (feature, policy, value) are disjoint and
//! individually addressable so gradient routing can be asserted per group.
//! Heads accept any feature node, which lets the trainer decide where
//! stop-gradient barriers go.

use crate::tape::{AdjointMap, Array, Gradients, NodeId, Tape, TapeError};
use rand::rngs::StdRng;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Hidden layer widths used when a config does not override them.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("optimizer/parameter mismatch: {0}")]
    GradientMismatch(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint parse: line {line}: {msg}")]
    CheckpointParse { line: usize, msg: String },
}

/// Disjoint parameter groups of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Feature,
    Policy,
    Value,
}

impl ParamGroup {
    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Feature => "feature",
            ParamGroup::Policy => "policy",
            ParamGroup::Value => "value",
        }
    }
}

/// One dense layer: `y = w x + b`, with `w` of shape out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array,
    pub b: Array,
}

impl Dense {
    fn glorot(rng: &mut StdRng, out: usize, inp: usize) -> Dense {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let w = Array::from_vec(
            (0..out * inp).map(|_| rng.gen_range(-limit..limit)).collect(),
            out,
            inp,
        );
        Dense {
            w,
            b: Array::zeros(out, 1),
        }
    }

    fn scale_weights(&mut self, c: f64) {
        for x in self.w.data_mut() {
            *x *= c;
        }
    }
}

/// Feature extractor (tanh MLP), one-layer softmax policy head, one-layer
/// raw-scalar value head.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticNet {
    obs_dim: usize,
    n_actions: usize,
    hidden: Vec<usize>,
    feature: Vec<Dense>,
    policy: Dense,
    value: Dense,
}

impl ActorCriticNet {
    /// Glorot-style uniform init; policy-head weights shrunk by 0.01 so the
    /// initial policy is near-uniform and its entropy starts near ln|A|.
    pub fn new(obs_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut StdRng) -> Self {
        assert!(!hidden.is_empty(), "at least one hidden layer required");
        let mut feature = Vec::with_capacity(hidden.len());
        let mut inp = obs_dim;
        for &h in hidden {
            feature.push(Dense::glorot(rng, h, inp));
            inp = h;
        }
        let mut policy = Dense::glorot(rng, n_actions, inp);
        policy.scale_weights(0.01);
        let value = Dense::glorot(rng, 1, inp);
        ActorCriticNet {
            obs_dim,
            n_actions,
            hidden: hidden.to_vec(),
            feature,
            policy,
            value,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Names, groups, and shapes of all parameters in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, ParamGroup)> {
        let mut specs = Vec::new();
        for i in 0..self.feature.len() {
            specs.push((format!("feature.{i}.w"), ParamGroup::Feature));
            specs.push((format!("feature.{i}.b"), ParamGroup::Feature));
        }
        specs.push(("policy.w".to_string(), ParamGroup::Policy));
        specs.push(("policy.b".to_string(), ParamGroup::Policy));
        specs.push(("value.w".to_string(), ParamGroup::Value));
        specs.push(("value.b".to_string(), ParamGroup::Value));
        specs
    }

    /// Parameter arrays in the same order as [`ActorCriticNet::param_specs`].
    pub fn param_values(&self) -> Vec<&Array> {
        let mut v = Vec::new();
        for layer in &self.feature {
            v.push(&layer.w);
            v.push(&layer.b);
        }
        v.push(&self.policy.w);
        v.push(&self.policy.b);
        v.push(&self.value.w);
        v.push(&self.value.b);
        v
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut Array> {
        let mut v = Vec::new();
        for layer in &mut self.feature {
            v.push(&mut layer.w);
            v.push(&mut layer.b);
        }
        v.push(&mut self.policy.w);
        v.push(&mut self.policy.b);
        v.push(&mut self.value.w);
        v.push(&mut self.value.b);
        v
    }

    /// Record every parameter as a tape leaf; the returned handle builds the
    /// forward graph and reads adjoints back by name.
    pub fn register(&self, tape: &mut Tape) -> TapeNet {
        let specs = self.param_specs();
        let values = self.param_values();
        let ids: Vec<NodeId> = values.iter().map(|a| tape.leaf((*a).clone())).collect();
        TapeNet {
            specs,
            ids,
            n_feature_layers: self.feature.len(),
        }
    }

    /// Fast non-recording forward pass; bit-identical to the tape forward.
    pub fn forward_numeric(&self, state: &[f64]) -> Result<(Vec<f64>, f64), NetError> {
        assert_eq!(state.len(), self.obs_dim, "state dimension mismatch");
        let mut x = state.to_vec();
        for layer in &self.feature {
            x = dense_numeric(layer, &x).iter().map(|&z| z.tanh()).collect();
        }
        let logits = dense_numeric(&self.policy, &x);
        let p = softmax_numeric(&logits);
        let v = dense_numeric(&self.value, &x)[0];
        if p.iter().any(|q| !q.is_finite()) {
            return Err(NetError::NonFinite("policy head"));
        }
        if !v.is_finite() {
            return Err(NetError::NonFinite("value head"));
        }
        Ok((p, v))
    }

    /// Record a full forward pass for one state: probabilities, value, and
    /// the feature node for routing decisions.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        state: &[f64],
    ) -> Result<(NodeId, NodeId, NodeId, TapeNet), NetError> {
        let reg = self.register(tape);
        let s = tape.leaf(Array::vector(state.to_vec()));
        let f = reg.features(tape, s)?;
        let logits = reg.policy_logits(tape, f)?;
        let p = tape.softmax(logits)?;
        let v = reg.value(tape, f)?;
        if tape.value(p).data().iter().any(|q| !q.is_finite()) {
            return Err(NetError::NonFinite("policy head"));
        }
        if !tape.value(v).data()[0].is_finite() {
            return Err(NetError::NonFinite("value head"));
        }
        Ok((p, v, f, reg))
    }

    /// Apply clipped gradients through the optimizer. Gradient names must
    /// match the parameter order exactly.
    pub fn apply_gradients(&mut self, opt: &mut Adam, grads: &AdjointMap) -> Result<(), NetError> {
        let specs = self.param_specs();
        if grads.len() != specs.len() {
            return Err(NetError::GradientMismatch(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                specs.len()
            )));
        }
        for ((name, _), (gname, _)) in specs.iter().zip(grads.iter()) {
            if name != gname {
                return Err(NetError::GradientMismatch(format!(
                    "gradient `{gname}` does not match parameter `{name}`"
                )));
            }
        }
        let gvecs: Vec<&[f64]> = grads.iter().map(|(_, g)| g).collect();
        opt.step(self.param_values_mut(), &gvecs)
    }

    /// Write parameters as a line-oriented text file (name, shape, values).
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut out = String::new();
        out.push_str("a2c-lab checkpoint v1\n");
        let _ = writeln!(out, "obs_dim {}", self.obs_dim);
        let _ = writeln!(out, "n_actions {}", self.n_actions);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        for ((name, _), arr) in self.param_specs().iter().zip(self.param_values()) {
            let _ = writeln!(out, "param {} {} {}", name, arr.rows(), arr.cols());
            let vals: Vec<String> = arr.data().iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a checkpoint written by [`ActorCriticNet::save`].
    pub fn load(path: &Path) -> Result<ActorCriticNet, NetError> {
        let text = std::fs::read_to_string(path)?;
        let parse_err = |line: usize, msg: String| NetError::CheckpointParse { line, msg };
        let mut lines = text.lines().enumerate();

        let mut expect_kv = |key: &str| -> Result<(usize, String), NetError> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing `{key}` line")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| parse_err(i + 1, format!("expected `{key} ...`, got `{line}`")))?;
            Ok((i + 1, rest.trim().to_string()))
        };

        let (i, header) = expect_kv("a2c-lab checkpoint")?;
        if header != "v1" {
            return Err(parse_err(i, format!("unsupported version `{header}`")));
        }
        let (i, obs) = expect_kv("obs_dim")?;
        let obs_dim: usize = obs
            .parse()
            .map_err(|e| parse_err(i, format!("bad obs_dim: {e}")))?;
        let (i, na) = expect_kv("n_actions")?;
        let n_actions: usize = na
            .parse()
            .map_err(|e| parse_err(i, format!("bad n_actions: {e}")))?;
        let (i, hid) = expect_kv("hidden")?;
        let hidden: Vec<usize> = hid
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(i, format!("bad hidden sizes: {e}")))?;

        let mut net = {
            let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(0);
            ActorCriticNet::new(obs_dim, n_actions, &hidden, &mut rng)
        };
        let specs = net.param_specs();
        let mut arrays = net.param_values_mut();
        for (k, (name, _)) in specs.iter().enumerate() {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing `param {name}` line")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[0] != "param" || fields[1] != name {
                return Err(parse_err(
                    i + 1,
                    format!("expected `param {name} ROWS COLS`, got `{line}`"),
                ));
            }
            let rows: usize = fields[2]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad rows: {e}")))?;
            let cols: usize = fields[3]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad cols: {e}")))?;
            let arr = &mut arrays[k];
            if rows != arr.rows() || cols != arr.cols() {
                return Err(parse_err(
                    i + 1,
                    format!(
                        "shape {rows}x{cols} does not match expected {}x{}",
                        arr.rows(),
                        arr.cols()
                    ),
                ));
            }
            let (j, vline) = lines
                .next()
                .ok_or_else(|| parse_err(i + 1, format!("missing values for {name}")))?;
            let vals: Vec<f64> = vline
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(j + 1, format!("bad value in {name}: {e}")))?;
            if vals.len() != rows * cols {
                return Err(parse_err(
                    j + 1,
                    format!("{name}: {} values for shape {rows}x{cols}", vals.len()),
                ));
            }
            arr.data_mut().copy_from_slice(&vals);
        }
        Ok(net)
    }
}

fn dense_numeric(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (layer.w.rows(), layer.w.cols());
    let mut y = vec![0.0; out];
    let w = layer.w.data();
    // Same accumulation order (and zero skip) as the tape matmul, then a
    // separate bias add, so values are bit-identical to the recorded pass.
    for i in 0..out {
        let mut acc = 0.0;
        for l in 0..inp {
            let wil = w[i * inp + l];
            if wil == 0.0 {
                continue;
            }
            acc += wil * x[l];
        }
        y[i] = acc + layer.b.data()[i];
    }
    y
}

fn softmax_numeric(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// A network registered on one tape: parameter leaves plus graph builders.
pub struct TapeNet {
    specs: Vec<(String, ParamGroup)>,
    ids: Vec<NodeId>,
    n_feature_layers: usize,
}

impl TapeNet {
    fn layer(&self, idx: usize) -> (NodeId, NodeId) {
        (self.ids[2 * idx], self.ids[2 * idx + 1])
    }

    /// Apply the feature extractor to a state node.
    pub fn features(&self, tape: &mut Tape, state: NodeId) -> Result<NodeId, TapeError> {
        let mut x = state;
        for i in 0..self.n_feature_layers {
            let (w, b) = self.layer(i);
            let z = tape.matmul(w, x)?;
            let z = tape.add(z, b)?;
            x = tape.tanh(z);
        }
        Ok(x)
    }

    /// Policy head on an arbitrary feature node (detached or live).
    pub fn policy_logits(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId, TapeError> {
        let (w, b) = self.layer(self.n_feature_layers);
        let z = tape.matmul(w, f)?;
        tape.add(z, b)
    }

    /// Value head on an arbitrary feature node; yields a 1x1 node.
    pub fn value(&self, tape: &mut Tape, f: NodeId) -> Result<NodeId, TapeError> {
        let (w, b) = self.layer(self.n_feature_layers + 1);
        let z = tape.matmul(w, f)?;
        tape.add(z, b)
    }

    /// Read back adjoints for every parameter, named and ordered like
    /// [`ActorCriticNet::param_specs`].
    pub fn adjoints(&self, tape: &Tape, grads: &Gradients) -> AdjointMap {
        let mut map = AdjointMap::new();
        for ((name, _), id) in self.specs.iter().zip(&self.ids) {
            map.push(name.clone(), grads.wrt(tape, *id));
        }
        map
    }

    /// Sum of |adjoint| over all parameters of one group; exactly 0.0 when
    /// no gradient reached the group.
    pub fn group_adjoint_abs(&self, tape: &Tape, grads: &Gradients, group: ParamGroup) -> f64 {
        self.specs
            .iter()
            .zip(&self.ids)
            .filter(|((_, g), _)| *g == group)
            .flat_map(|(_, id)| grads.wrt(tape, *id))
            .map(f64::abs)
            .sum()
    }
}

/// Adam with bias correction. Moment buffers mirror parameter shapes and are
/// allocated on first use.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over parallel lists of parameters and gradients.
    pub fn step(&mut self, mut params: Vec<&mut Array>, grads: &[&[f64]]) -> Result<(), NetError> {
        if params.len() != grads.len() {
            return Err(NetError::GradientMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(NetError::GradientMismatch(format!(
                    "parameter {k}: {} values, gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for ((pi, gi), (mi, vi)) in
                p.data_mut().iter_mut().zip(*g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                if !update.is_finite() {
                    return Err(NetError::NonFinite("optimizer update"));
                }
                *pi -= update;
            }
        }
        Ok(())
    }
}
