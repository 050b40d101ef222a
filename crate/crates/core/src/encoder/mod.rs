//! Location-conditioned patch encoder, projection head and the momentum key copy.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::volume::Point;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How the landmark coordinate enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Plain convolutions; the coordinate is ignored.
    None,
    /// Coordinate appended to the pooled features and fused by one hidden layer.
    Concat,
    /// A coordinate MLP emits every convolution kernel and bias.
    HyperNet,
    /// Sigmoid-routed mixture of expert kernels.
    LocCondConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub experts: usize,
    pub embedding_dim: usize,
    pub conditioning: Conditioning,
    pub hyper_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 16, 32, 32],
            strides: vec![1, 2, 1, 2],
            experts: 4,
            embedding_dim: 16,
            conditioning: Conditioning::LocCondConv,
            hyper_hidden: 8,
        }
    }
}

impl EncoderConfig {
    pub fn representation_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.strides.len() + 1 != self.channels.len() {
            return Err(Error::Config(format!(
                "encoder needs one stride per block: {} channels, {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.channels[0] != 1 || self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("encoder channels must start at 1 and be positive".into()));
        }
        if self.experts == 0 || self.embedding_dim == 0 || self.hyper_hidden == 0 {
            return Err(Error::Config("experts, embedding_dim and hyper_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extent of the last feature map for a `d`-cube patch.
    pub fn feature_extent(&self, d: usize) -> usize {
        self.strides.iter().fold(d, |e, &s| (e + 2 - 3) / s + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    /// Weight decay applies to weights only, never to biases or normalization affines.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
enum ConvLayout {
    Mixture { experts: usize, bias: usize, routing: usize },
    Static { kernel: usize, bias: usize },
    Hyper { w1: usize, b1: usize, w2: usize, b2: usize },
}

#[derive(Clone, Debug)]
struct Block {
    conv: ConvLayout,
    gamma: usize,
    beta: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Head {
    fuse: Option<(usize, usize)>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated from them.
    Train,
    /// Batch statistics without touching running statistics (key encoder).
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// Forward-pass options beyond the inputs.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub bn: BnMode,
    /// Replaces the routed mixture weights of every layer (test hook).
    pub alpha_override: Option<Vec<f64>>,
}

impl ForwardOptions {
    pub fn new(bn: BnMode) -> Self {
        Self {
            bn,
            alpha_override: None,
        }
    }
}

pub struct ForwardOutput {
    /// Last block output before pooling, `[B, R, f, f, f]`.
    pub feature_map: Var,
    /// Pooled representation, `[B, R]`.
    pub representation: Var,
    /// Unit-norm projection, `[B, E]`.
    pub embedding: Var,
    /// Batches whose projection was numerically zero before normalization.
    pub degenerate_projection: bool,
    pub batch_stats: Vec<BatchStats>,
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive variance");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// One network `f = g . e`: convolution blocks with batch norm and ELU,
/// global average pooling, and a two-layer projection head.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub config: EncoderConfig,
    pub params: Vec<Param<T>>,
    pub running: Vec<RunningStats<T>>,
    blocks: Vec<Block>,
    head: Head,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param<T>> = Vec::new();
        let push = |params: &mut Vec<Param<T>>, name: String, value: Tensor<T>, kind| {
            params.push(Param { name, value, kind });
            params.len() - 1
        };
        let n = config.experts;
        let mut blocks = Vec::new();
        let mut running = Vec::new();
        for (i, w) in config.channels.windows(2).enumerate() {
            let (c_in, c_out) = (w[0], w[1]);
            let fan_in = c_in * 27;
            let m = c_out * fan_in;
            let conv = match config.conditioning {
                Conditioning::LocCondConv => ConvLayout::Mixture {
                    experts: push(&mut params, format!("block{i}.experts"), he_normal(&mut rng, &[n, m], fan_in), ParamKind::Weight),
                    bias: push(&mut params, format!("block{i}.expert_bias"), Tensor::zeros(&[n, c_out]), ParamKind::Bias),
                    routing: push(&mut params, format!("block{i}.routing"), Tensor::zeros(&[3, n]), ParamKind::Weight),
                },
                Conditioning::None | Conditioning::Concat => ConvLayout::Static {
                    kernel: push(&mut params, format!("block{i}.kernel"), he_normal(&mut rng, &[c_out, c_in, 3, 3, 3], fan_in), ParamKind::Weight),
                    bias: push(&mut params, format!("block{i}.bias"), Tensor::zeros(&[c_out]), ParamKind::Bias),
                },
                Conditioning::HyperNet => {
                    let h = config.hyper_hidden;
                    // the generated kernel starts as a He-initialized static kernel
                    let base: Tensor<T> = he_normal(&mut rng, &[1, m], fan_in);
                    let mut b2 = base.into_data();
                    b2.extend(std::iter::repeat_n(T::zero(), c_out));
                    ConvLayout::Hyper {
                        w1: push(&mut params, format!("block{i}.hyper_w1"), he_normal(&mut rng, &[3, h], 3), ParamKind::Weight),
                        b1: push(&mut params, format!("block{i}.hyper_b1"), Tensor::zeros(&[h]), ParamKind::Bias),
                        w2: push(&mut params, format!("block{i}.hyper_w2"), Tensor::zeros(&[h, m + c_out]), ParamKind::Weight),
                        b2: push(&mut params, format!("block{i}.hyper_b2"), Tensor::new(vec![m + c_out], b2)?, ParamKind::Bias),
                    }
                }
            };
            blocks.push(Block {
                conv,
                gamma: push(&mut params, format!("block{i}.bn_gamma"), Tensor::full(&[c_out], T::one()), ParamKind::Norm),
                beta: push(&mut params, format!("block{i}.bn_beta"), Tensor::zeros(&[c_out]), ParamKind::Norm),
                c_in,
                c_out,
                stride: config.strides[i],
            });
            running.push(RunningStats {
                mean: vec![T::zero(); c_out],
                var: vec![T::one(); c_out],
            });
        }
        let r = config.representation_dim();
        let e = config.embedding_dim;
        let fuse = (config.conditioning == Conditioning::Concat).then(|| {
            (
                push(&mut params, "fuse.w".into(), he_normal(&mut rng, &[r + 3, r], r + 3), ParamKind::Weight),
                push(&mut params, "fuse.b".into(), Tensor::zeros(&[r]), ParamKind::Bias),
            )
        });
        let head = Head {
            fuse,
            w1: push(&mut params, "head.w1".into(), he_normal(&mut rng, &[r, r], r), ParamKind::Weight),
            b1: push(&mut params, "head.b1".into(), Tensor::zeros(&[r]), ParamKind::Bias),
            w2: push(&mut params, "head.w2".into(), he_normal(&mut rng, &[r, e], r), ParamKind::Weight),
            b2: push(&mut params, "head.b2".into(), Tensor::zeros(&[e]), ParamKind::Bias),
        };
        Ok(Self {
            config: config.clone(),
            params,
            running,
            blocks,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Places every parameter on the tape, in parameter order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect()
    }

    /// Sets every location routing matrix to zero, making the expert mixture uniform.
    pub fn zero_routing(&mut self) {
        for b in &self.blocks {
            if let ConvLayout::Mixture { routing, .. } = b.conv {
                let shape = self.params[routing].value.shape().to_vec();
                self.params[routing].value = Tensor::zeros(&shape);
            }
        }
    }

    /// Routing weights `sigmoid(p^T W_r)` of block `i` (mixture conditioning only).
    pub fn routing(&self, block: usize, p_norm: Point) -> Option<Vec<f64>> {
        let ConvLayout::Mixture { routing, .. } = self.blocks.get(block)?.conv else {
            return None;
        };
        let w = &self.params[routing].value;
        let n = w.shape()[1];
        Some(
            (0..n)
                .map(|k| {
                    let z: f64 = (0..3).map(|a| p_norm[a] * w.data()[a * n + k].to_f64().unwrap_or(0.0)).sum();
                    1.0 / (1.0 + (-z).exp())
                })
                .collect(),
        )
    }

    /// Builds the convolution kernel and bias of block `i` for coordinate `p`.
    fn block_kernel(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        block: &Block,
        p: Var,
        alpha_override: Option<&[f64]>,
    ) -> Result<(Var, Var)> {
        let kshape = [block.c_out, block.c_in, 3, 3, 3];
        match block.conv {
            ConvLayout::Mixture { experts, bias, routing } => {
                let n = self.config.experts;
                let alpha = match alpha_override {
                    Some(a) => {
                        if a.len() != n {
                            return Err(Error::Shape {
                                op: "loc_cond_conv",
                                axis: 1,
                                expected: n,
                                actual: a.len(),
                            });
                        }
                        tape.constant(Tensor::new(vec![1, n], a.iter().map(|&v| T::lit(v)).collect())?)
                    }
                    None => {
                        let z = tape.matmul(p, vars[routing])?;
                        tape.sigmoid(z)?
                    }
                };
                let k = tape.matmul(alpha, vars[experts])?;
                let k = tape.reshape(k, &kshape)?;
                let b = tape.matmul(alpha, vars[bias])?;
                let b = tape.reshape(b, &[block.c_out])?;
                Ok((k, b))
            }
            ConvLayout::Static { kernel, bias } => Ok((vars[kernel], vars[bias])),
            ConvLayout::Hyper { w1, b1, w2, b2 } => {
                let h = tape.matmul(p, vars[w1])?;
                let h = tape.add_bias(h, vars[b1])?;
                let h = tape.relu(h)?;
                let o = tape.matmul(h, vars[w2])?;
                let o = tape.add_bias(o, vars[b2])?;
                let m = block.c_out * block.c_in * 27;
                let k = tape.narrow(o, 1, 0, m)?;
                let k = tape.reshape(k, &kshape)?;
                let b = tape.narrow(o, 1, m, block.c_out)?;
                let b = tape.reshape(b, &[block.c_out])?;
                Ok((k, b))
            }
        }
    }

    /// Encoder blocks only: returns the pre-pool feature map. `x` is `[B, 1, d, d, d]`;
    /// `coords` holds one normalized coordinate shared by the batch or one per sample.
    pub fn features(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        coords: &[Point],
        opts: &ForwardOptions,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let batch = tape.shape(x)[0];
        if coords.len() != 1 && coords.len() != batch {
            return Err(Error::Shape {
                op: "encoder_coords",
                axis: 0,
                expected: batch,
                actual: coords.len(),
            });
        }
        let mut ps = Vec::with_capacity(coords.len());
        for c in coords {
            ps.push(tape.constant(Tensor::new(vec![1, 3], c.iter().map(|&v| T::lit(v)).collect())?));
        }
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let at = |e: Error| match e {
                Error::NonFinite(op) => Error::NonFinite(format!("{op} in encoder block {i}")),
                other => other,
            };
            let shared = ps.len() == 1 || matches!(block.conv, ConvLayout::Static { .. });
            let c = if shared {
                let (k, b) = self.block_kernel(tape, vars, block, ps[0], opts.alpha_override.as_deref()).map_err(at)?;
                tape.conv3d(h, k, Some(b), block.stride, 1).map_err(at)?
            } else {
                let mut outs = Vec::with_capacity(ps.len());
                for (s, &p) in ps.iter().enumerate() {
                    let xs = tape.narrow(h, 0, s, 1)?;
                    let (k, b) = self.block_kernel(tape, vars, block, p, opts.alpha_override.as_deref()).map_err(at)?;
                    outs.push(tape.conv3d(xs, k, Some(b), block.stride, 1).map_err(at)?);
                }
                tape.concat(&outs, 0)?
            };
            let n = match opts.bn {
                BnMode::Train | BnMode::TrainFrozen => {
                    let (y, s) = tape.batch_norm_train(c, vars[block.gamma], vars[block.beta], BN_EPS).map_err(at)?;
                    stats.push(s);
                    y
                }
                BnMode::Eval => {
                    let rs = &self.running[i];
                    tape.batch_norm_eval(c, vars[block.gamma], vars[block.beta], &rs.mean, &rs.var, BN_EPS).map_err(at)?
                }
            };
            h = tape.elu(n).map_err(at)?;
        }
        Ok(h)
    }

    /// Full forward pass `f = g . e`; `coords` as in [`Network::features`].
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, coords: &[Point], opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut batch_stats = Vec::new();
        let feature_map = self.features(tape, vars, x, coords, opts, &mut batch_stats)?;
        let mut rep = tape.global_avg_pool(feature_map)?;
        if let Some((fw, fb)) = self.head.fuse {
            let b = tape.shape(rep)[0];
            let shared = coords.len() == 1;
            let coords = tape.constant(Tensor::from_fn(&[b, 3], |i| T::lit(coords[if shared { 0 } else { i / 3 }][i % 3])));
            let joined = tape.concat(&[rep, coords], 1)?;
            let fused = tape.matmul(joined, vars[fw])?;
            let fused = tape.add_bias(fused, vars[fb])?;
            rep = tape.elu(fused)?;
        }
        let (embedding, degenerate) = self.project(tape, vars, rep)?;
        Ok(ForwardOutput {
            feature_map,
            representation: rep,
            embedding,
            degenerate_projection: degenerate,
            batch_stats,
        })
    }

    /// Projection head `R -> R -> E` with ReLU, then L2 normalization.
    pub fn project(&self, tape: &mut Tape<T>, vars: &[Var], rep: Var) -> Result<(Var, bool)> {
        let h = tape.matmul(rep, vars[self.head.w1])?;
        let h = tape.add_bias(h, vars[self.head.b1])?;
        let h = tape.relu(h)?;
        let z = tape.matmul(h, vars[self.head.w2])?;
        let z = tape.add_bias(z, vars[self.head.b2])?;
        let e = self.config.embedding_dim;
        let degenerate = tape
            .value(z)
            .data()
            .chunks(e)
            .any(|row| row.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>() < 1e-12);
        Ok((tape.l2_normalize(z)?, degenerate))
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::invalid(
                "update_running_stats",
                format!("{} batch statistics for {} blocks", stats.len(), self.running.len()),
            ));
        }
        let m = BN_MOMENTUM;
        for (rs, s) in self.running.iter_mut().zip(stats) {
            for (r, &b) in rs.mean.iter_mut().zip(&s.mean) {
                *r = T::lit((1.0 - m) * r.to_f64().unwrap_or(0.0) + m * b);
            }
            for (r, &b) in rs.var.iter_mut().zip(&s.var) {
                *r = T::lit((1.0 - m) * r.to_f64().unwrap_or(0.0) + m * b);
            }
        }
        Ok(())
    }

    /// Eval-mode representation of a batch of patches, `[B, R]` row-major.
    pub fn encode(&self, patches: Tensor<T>, coords: &[Point]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(patches);
        let out = self.forward(&mut tape, &vars, x, coords, &ForwardOptions::new(BnMode::Eval))?;
        Ok(tape.value(out.representation).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::lit(v.to_f64().unwrap_or(0.0))).collect(),
                    var: r.var.iter().map(|v| U::lit(v.to_f64().unwrap_or(0.0))).collect(),
                })
                .collect(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    fn check_same_structure(&self, other: &Network<T>) -> Result<()> {
        let same = self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && self.running.len() == other.running.len();
        if same {
            Ok(())
        } else {
            Err(Error::invalid("momentum_update", "query and key networks differ in structure"))
        }
    }
}

/// Query network trained by gradient descent and its momentum-averaged key copy.
#[derive(Clone, Debug)]
pub struct EncoderPair<T: Scalar> {
    pub query: Network<T>,
    pub key: Network<T>,
    pub momentum: f64,
}

impl<T: Scalar> EncoderPair<T> {
    pub fn new(config: &EncoderConfig, seed: u64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("key momentum must lie in [0, 1), got {momentum}")));
        }
        let query = Network::new(config, seed)?;
        Ok(Self {
            key: query.clone(),
            query,
            momentum,
        })
    }

    /// `theta_k <- m theta_k + (1 - m) theta_q` for every parameter; running
    /// statistics are copied from the query.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&self.query, &mut self.key, self.momentum)
    }
}

pub fn momentum_update<T: Scalar>(query: &Network<T>, key: &mut Network<T>, m: f64) -> Result<()> {
    query.check_same_structure(key)?;
    let mt = T::lit(m);
    let one_minus = T::lit(1.0 - m);
    for (k, q) in key.params.iter_mut().zip(&query.params) {
        for (kv, qv) in k.value.data_mut().iter_mut().zip(q.value.data()) {
            *kv = mt * *kv + one_minus * *qv;
        }
    }
    key.running = query.running.clone();
    Ok(())
}
