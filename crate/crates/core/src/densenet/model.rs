use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{ArchitectureConfig, LayerKind, LayerPlan};
use super::ModelError;
use crate::engine::{BnState, Mode, Parameter, PoolKind, Tape, Tensor, Var, BN_EPS};

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnRef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone, Copy)]
struct FcRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct SeRef {
    fc1: FcRef,
    fc2: FcRef,
}

#[derive(Debug, Clone)]
enum Body {
    Stem { conv: ConvRef, bn: BnRef },
    Dense { bn: BnRef, conv: ConvRef, se: Option<SeRef> },
    Transition { bn: BnRef, conv: ConvRef, se: Option<SeRef>, pool: PoolKind },
    Head { fc: FcRef },
}

/// One named stage of the network and the contiguous range of parameters it owns.
#[derive(Debug, Clone)]
pub struct Layer {
    pub plan: LayerPlan,
    pub params: Range<usize>,
    body: Body,
}

/// Named batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct BnBuffer {
    /// Prefix shared with the owning batch-norm's parameters, e.g. `stem/bn`.
    pub name: String,
    pub state: BnState,
    /// Index of the gamma parameter; running stats only move while it is trainable.
    gamma: usize,
}

/// Batch statistics observed during a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub buffer: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// DenseNet with optional squeeze-and-excitation recalibration.
#[derive(Debug, Clone)]
pub struct Model {
    config: ArchitectureConfig,
    layers: Vec<Layer>,
    pub params: Vec<Parameter>,
    pub buffers: Vec<BnBuffer>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Parameter>,
    buffers: Vec<BnBuffer>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvRef {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(self.rng)).collect();
        let w = self.push(format!("{prefix}/w"), Tensor::from_parts(vec![cout, cin, k, k], data));
        let b = self.push(format!("{prefix}/b"), Tensor::zeros(&[cout]));
        ConvRef { w, b, pad: k / 2 }
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnRef {
        let gamma = self.push(format!("{prefix}/gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.push(format!("{prefix}/beta"), Tensor::zeros(&[channels]));
        self.buffers.push(BnBuffer {
            name: prefix.to_string(),
            state: BnState::new(channels),
            gamma,
        });
        BnRef {
            gamma,
            beta,
            state: self.buffers.len() - 1,
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(self.rng)).collect())
    }

    /// `zero_bias` leaves the bias at zero instead of drawing it.
    fn fc(&mut self, prefix: &str, din: usize, dout: usize, zero_bias: bool) -> FcRef {
        let bound = (1.0 / din as f32).sqrt();
        let wt = self.uniform(&[dout, din], bound);
        let w = self.push(format!("{prefix}/w"), wt);
        let bt = if zero_bias {
            Tensor::zeros(&[dout])
        } else {
            self.uniform(&[dout], bound)
        };
        let b = self.push(format!("{prefix}/b"), bt);
        FcRef { w, b }
    }

    fn se(&mut self, prefix: &str, channels: usize, reduction: usize) -> SeRef {
        let hidden = channels / reduction;
        SeRef {
            fc1: self.fc(&format!("{prefix}/fc1"), channels, hidden, true),
            fc2: self.fc(&format!("{prefix}/fc2"), hidden, channels, true),
        }
    }
}

impl Model {
    /// Builds the network described by `config`, initializing every tensor from `seed`.
    pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<Self, ModelError> {
        let plans = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let mut layers = Vec::with_capacity(plans.len());
        for plan in plans {
            let start = b.params.len();
            let n = plan.name.clone();
            let body = match plan.kind {
                LayerKind::Stem => Body::Stem {
                    conv: b.conv(&format!("{n}/conv"), 3, plan.out_channels, 3),
                    bn: b.bn(&format!("{n}/bn"), plan.out_channels),
                },
                LayerKind::Dense => Body::Dense {
                    bn: b.bn(&format!("{n}/bn"), plan.in_channels),
                    conv: b.conv(&format!("{n}/conv"), plan.in_channels, config.growth_rate, 3),
                    se: plan.se_channels.map(|c| b.se(&format!("{n}/se"), c, config.se_reduction)),
                },
                LayerKind::Transition => Body::Transition {
                    bn: b.bn(&format!("{n}/bn"), plan.in_channels),
                    conv: b.conv(&format!("{n}/conv"), plan.in_channels, plan.out_channels, 1),
                    se: plan.se_channels.map(|c| b.se(&format!("{n}/se"), c, config.se_reduction)),
                    pool: config.transition_pool,
                },
                LayerKind::Head => Body::Head {
                    fc: b.fc(&format!("{n}/fc"), plan.in_channels, plan.out_channels, false),
                },
            };
            layers.push(Layer {
                plan,
                params: start..b.params.len(),
                body,
            });
        }
        Ok(Self {
            config: config.clone(),
            layers,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Sum of element counts over (trainable) parameters.
    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let s = self.config.input_hw;
        match batch.shape() {
            [n, 3, h, w] if *n > 0 && *h == s && *w == s => Ok(()),
            other => Err(ModelError::InputShape {
                expected: format!("[N, 3, {s}, {s}]"),
                got: other.to_vec(),
            }),
        }
    }

    /// Records the whole forward pass on `tape`, starting from the input value `x`.
    ///
    /// Running statistics are not touched; train-mode batch statistics are returned
    /// so the caller decides whether to fold them in.
    pub fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        dropout_rate: f32,
        rng: &mut R,
    ) -> Result<(Var, Vec<BnUpdate>), ModelError> {
        self.check_input(tape.value(x))?;
        let mut updates = Vec::new();
        let mut h = x;
        for idx in 0..self.layers.len() {
            h = self.record_layer(tape, idx, h, mode, dropout_rate, rng, &mut updates)?;
        }
        Ok((h, updates))
    }

    /// Records layer `idx` alone on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn record_layer<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: Var,
        mode: Mode,
        dropout_rate: f32,
        rng: &mut R,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, ModelError> {
        let layer = &self.layers[idx];
        let got = tape.value(x).shape()[1];
        if got != layer.plan.in_channels {
            return Err(ModelError::ChannelMismatch {
                layer: layer.plan.name.clone(),
                expected: layer.plan.in_channels,
                got,
            });
        }
        let out = match layer.body {
            Body::Stem { conv, bn } => {
                let c = self.conv(tape, x, conv, 1)?;
                let n = self.bn(tape, c, bn, mode, updates)?;
                tape.relu(n)
            }
            Body::Dense { bn, conv, se } => {
                let n = self.bn(tape, x, bn, mode, updates)?;
                let a = tape.relu(n);
                let mut fresh = self.conv(tape, a, conv, 1)?;
                if let Some(se) = se {
                    fresh = self.se(tape, fresh, se)?;
                }
                tape.concat_channels(&[x, fresh])?
            }
            Body::Transition { bn, conv, se, pool } => {
                let n = self.bn(tape, x, bn, mode, updates)?;
                let a = tape.relu(n);
                let c = self.conv(tape, a, conv, 1)?;
                let mut p = tape.pool2d(c, pool, 2, 2)?;
                if let Some(se) = se {
                    p = self.se(tape, p, se)?;
                }
                p
            }
            Body::Head { fc } => {
                let z = tape.global_avg_pool(x)?;
                let d = tape.dropout(z, dropout_rate, mode, rng)?;
                self.fc(tape, d, fc)?
            }
        };
        Ok(out)
    }

    fn leaf(&self, tape: &mut Tape, idx: usize) -> Var {
        tape.param(idx, &self.params[idx].value)
    }

    fn conv(&self, tape: &mut Tape, x: Var, c: ConvRef, stride: usize) -> Result<Var, ModelError> {
        let w = self.leaf(tape, c.w);
        let b = self.leaf(tape, c.b);
        Ok(tape.conv2d(x, w, b, stride, c.pad)?)
    }

    fn bn(&self, tape: &mut Tape, x: Var, r: BnRef, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var, ModelError> {
        let g = self.leaf(tape, r.gamma);
        let b = self.leaf(tape, r.beta);
        // A frozen batch-norm is a fixed affine map: running statistics in both modes.
        let mode = if self.params[r.gamma].trainable { mode } else { Mode::Infer };
        let (y, stats) = tape.batch_norm(x, g, b, &self.buffers[r.state].state, mode, BN_EPS)?;
        if let Some((mean, var)) = stats {
            updates.push(BnUpdate {
                buffer: r.state,
                mean,
                var,
            });
        }
        Ok(y)
    }

    fn fc(&self, tape: &mut Tape, x: Var, f: FcRef) -> Result<Var, ModelError> {
        let w = self.leaf(tape, f.w);
        let b = self.leaf(tape, f.b);
        Ok(tape.fully_connected(x, w, b)?)
    }

    /// Squeeze (global average pool), excite (FC → ReLU → FC → sigmoid), rescale.
    fn se(&self, tape: &mut Tape, u: Var, se: SeRef) -> Result<Var, ModelError> {
        let z = tape.global_avg_pool(u)?;
        let h = self.fc(tape, z, se.fc1)?;
        let h = tape.relu(h);
        let s = self.fc(tape, h, se.fc2)?;
        let s = tape.sigmoid(s);
        Ok(tape.scale_channels(u, s)?)
    }

    /// Folds train-mode batch statistics into the running statistics of
    /// batch-norm layers whose parameters are trainable. Frozen layers keep theirs.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let buf = &mut self.buffers[u.buffer];
            if self.params[buf.gamma].trainable {
                buf.state.update(&u.mean, &u.var);
            }
        }
    }

    /// Deterministic inference-mode logits `[N, num_classes]`.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        // Dropout is the identity at inference, so the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = self.record(&mut tape, x, Mode::Infer, 0.0, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass in either mode. Train mode uses the configured dropout rate
    /// and folds batch statistics into the running statistics.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor, ModelError> {
        match mode {
            Mode::Infer => self.infer(batch),
            Mode::Train => {
                let mut tape = Tape::new();
                let x = tape.input(batch.clone());
                let (logits, updates) = self.record(&mut tape, x, mode, self.config.dropout_rate, rng)?;
                self.apply_bn_updates(&updates);
                Ok(tape.value(logits).clone())
            }
        }
    }

    /// Named tensors that are not parameters: `<bn prefix>/running_mean` and `/running_var`.
    pub fn buffer_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.buffers.len() * 2);
        for b in &self.buffers {
            let c = b.state.mean.len();
            out.push((format!("{}/running_mean", b.name), Tensor::from_parts(vec![c], b.state.mean.clone())));
            out.push((format!("{}/running_var", b.name), Tensor::from_parts(vec![c], b.state.var.clone())));
        }
        out
    }

    /// Overwrites a running-statistics buffer by its full name. Returns false when
    /// the name is unknown or the length differs.
    pub fn set_buffer(&mut self, name: &str, data: &[f32]) -> bool {
        for b in &mut self.buffers {
            let target = if name == format!("{}/running_mean", b.name) {
                &mut b.state.mean
            } else if name == format!("{}/running_var", b.name) {
                &mut b.state.var
            } else {
                continue;
            };
            if target.len() != data.len() {
                return false;
            }
            target.copy_from_slice(data);
            return true;
        }
        false
    }

    /// Index of the layer owning parameter `idx`.
    pub fn layer_of_param(&self, idx: usize) -> usize {
        self.layers
            .iter()
            .position(|l| l.params.contains(&idx))
            .expect("every parameter belongs to a layer")
    }
}

/// Weights of one squeeze-and-excitation module.
#[derive(Debug, Clone)]
pub struct SeWeights {
    /// `[C/r, C]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[C, C/r]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SeWeights {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let h = channels / reduction;
        Self {
            w1: Tensor::zeros(&[h, channels]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[channels, h]),
            b2: Tensor::zeros(&[channels]),
        }
    }
}

/// Per-channel gates `s = σ(W2·relu(W1·z + b1) + b2)` for `u: [N,C,H,W]`.
pub fn se_gates(u: &Tensor, se: &SeWeights) -> Result<Tensor, ModelError> {
    use crate::engine::{elementwise, fully_connected, global_avg_pool, Activation};
    let z = global_avg_pool(u)?;
    let h = elementwise(&fully_connected(&z, &se.w1, &se.b1)?, Activation::Relu);
    Ok(elementwise(&fully_connected(&h, &se.w2, &se.b2)?, Activation::Sigmoid))
}

/// Recalibrates `u` channel-wise by its SE gates.
pub fn se_forward(u: &Tensor, se: &SeWeights) -> Result<Tensor, ModelError> {
    let s = se_gates(u, se)?;
    Ok(crate::engine::scale_channels(u, &s)?)
}
