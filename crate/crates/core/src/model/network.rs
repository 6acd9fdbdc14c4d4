use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Layer, LayerKind, Mode, Tensor};

/// Multi-exit MLP: `depth` blocks of Dense → BatchNorm → ReLU → Dropout,
/// with the final block omitting dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub num_classes: usize,
    pub depth: usize,
    /// 1-based block indices after which a head is attached.
    pub exit_positions: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 200,
            width: 256,
            num_classes: 16,
            depth: 5,
            exit_positions: vec![1, 3, 5],
            dropout: 0.2,
        }
    }
}

/// Multi-exit CNN: one 3×3 Conv → BatchNorm → ReLU → MaxPool block per width,
/// with a GlobalAvgPool → Dense head after every block.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            in_channels: 1,
            widths: vec![32, 64, 128],
            num_classes: 10,
            image_size: 28,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Mlp(MlpConfig),
    Cnn(CnnConfig),
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.num_classes,
            Architecture::Cnn(c) => c.num_classes,
        }
    }

    /// Shape of one input sample (without the batch dimension).
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp(c) => vec![c.input_dim],
            Architecture::Cnn(c) => vec![c.in_channels, c.image_size, c.image_size],
        }
    }
}

/// An ordered stack of layers run as one unit.
#[derive(Debug, Clone)]
pub struct Block {
    pub layers: Vec<Layer>,
}

impl Block {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.layers[0].forward(x, mode)?;
        for layer in &mut self.layers[1..] {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let mut shape = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            total += l.macs(&shape)?;
            shape = l.output_shape(&shape)?;
        }
        Ok(total)
    }
}

/// Classifier attached to the backbone; its last layer is a softmax.
#[derive(Debug, Clone)]
pub struct ExitHead {
    pub layers: Vec<Layer>,
}

impl ExitHead {
    /// Returns `(logits, probabilities)`.
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (softmax, body) = self.layers.split_last_mut().expect("head has layers");
        let mut h = x.clone();
        for layer in body {
            h = layer.forward(&h, mode)?;
        }
        let p = softmax.forward(&h, mode)?;
        Ok((h, p))
    }

    /// Backward from a gradient on the logits (the softmax is folded into the loss).
    fn backward_from_logits(&mut self, grad: &Tensor) -> Result<Tensor> {
        let body = self.layers.len() - 1;
        let mut g = grad.clone();
        for layer in self.layers[..body].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

/// Per-exit outputs for a batch: `logits[e]` and `probs[e]` are `n × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs {
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
}

impl ExitOutputs {
    pub fn num_exits(&self) -> usize {
        self.probs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.probs[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs[0].shape()[1]
    }

    /// Probability vector of sample `i` at exit `e` (both 0-based).
    pub fn prob(&self, i: usize, e: usize) -> &[f64] {
        self.probs[e].row(i)
    }
}

#[derive(Debug, Clone)]
pub struct MultiExitNetwork {
    arch: Architecture,
    blocks: Vec<Block>,
    heads: Vec<ExitHead>,
    exit_positions: Vec<usize>,
    frozen_blocks: Vec<bool>,
    frozen_heads: Vec<bool>,
    block_runs: usize,
}

/// Multi-exit MLP with the given configuration and initialisation seed.
pub fn build_mlp(config: MlpConfig, seed: u64) -> Result<MultiExitNetwork> {
    MultiExitNetwork::build(Architecture::Mlp(config), seed)
}

/// Multi-exit CNN with the given configuration and initialisation seed.
pub fn build_cnn(config: CnnConfig, seed: u64) -> Result<MultiExitNetwork> {
    MultiExitNetwork::build(Architecture::Cnn(config), seed)
}

fn validate_exits(exits: &[usize], num_blocks: usize) -> Result<()> {
    if exits.len() < 2 {
        return Err(Error::invalid("a multi-exit network needs at least two exits"));
    }
    if exits[0] == 0 || exits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "exit positions must be strictly increasing and 1-based, got {exits:?}"
        )));
    }
    if *exits.last().unwrap() != num_blocks {
        return Err(Error::invalid(format!(
            "last exit must attach to the final block {num_blocks}, got {exits:?}"
        )));
    }
    Ok(())
}

impl MultiExitNetwork {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |kind| Layer::new(kind, &mut rng);
        let (blocks, heads, exits) = match &arch {
            Architecture::Mlp(c) => {
                if c.input_dim == 0 || c.width == 0 || c.depth == 0 {
                    return Err(Error::invalid("MLP dimensions must be positive"));
                }
                if c.num_classes < 2 {
                    return Err(Error::invalid("need at least two classes"));
                }
                validate_exits(&c.exit_positions, c.depth)?;
                let mut blocks = Vec::with_capacity(c.depth);
                for b in 0..c.depth {
                    let inputs = if b == 0 { c.input_dim } else { c.width };
                    let mut layers = vec![
                        layer(LayerKind::Dense {
                            inputs,
                            outputs: c.width,
                        })?,
                        layer(LayerKind::BatchNorm { features: c.width })?,
                        layer(LayerKind::Relu)?,
                    ];
                    if b + 1 < c.depth {
                        layers.push(layer(LayerKind::Dropout { p: c.dropout })?);
                    }
                    blocks.push(Block { layers });
                }
                let heads = c
                    .exit_positions
                    .iter()
                    .map(|_| {
                        Ok(ExitHead {
                            layers: vec![
                                layer(LayerKind::Dense {
                                    inputs: c.width,
                                    outputs: c.num_classes,
                                })?,
                                layer(LayerKind::Softmax)?,
                            ],
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (blocks, heads, c.exit_positions.clone())
            }
            Architecture::Cnn(c) => {
                if c.in_channels == 0 || c.widths.contains(&0) {
                    return Err(Error::invalid("CNN channel counts must be positive"));
                }
                if c.num_classes < 2 {
                    return Err(Error::invalid("need at least two classes"));
                }
                if c.image_size >> c.widths.len() == 0 {
                    return Err(Error::invalid(format!(
                        "image size {} too small for {} pooling stages",
                        c.image_size,
                        c.widths.len()
                    )));
                }
                let exits: Vec<usize> = (1..=c.widths.len()).collect();
                validate_exits(&exits, c.widths.len())?;
                let mut blocks = Vec::new();
                let mut heads = Vec::new();
                let mut in_ch = c.in_channels;
                for &w in &c.widths {
                    blocks.push(Block {
                        layers: vec![
                            layer(LayerKind::Conv3x3 {
                                in_channels: in_ch,
                                out_channels: w,
                            })?,
                            layer(LayerKind::BatchNorm { features: w })?,
                            layer(LayerKind::Relu)?,
                            layer(LayerKind::MaxPool2x2)?,
                        ],
                    });
                    heads.push(ExitHead {
                        layers: vec![
                            layer(LayerKind::GlobalAvgPool)?,
                            layer(LayerKind::Dense {
                                inputs: w,
                                outputs: c.num_classes,
                            })?,
                            layer(LayerKind::Softmax)?,
                        ],
                    });
                    in_ch = w;
                }
                (blocks, heads, exits)
            }
        };
        let mut net = MultiExitNetwork {
            frozen_blocks: vec![false; blocks.len()],
            frozen_heads: vec![false; heads.len()],
            arch,
            blocks,
            heads,
            exit_positions: exits,
            block_runs: 0,
        };
        net.reseed_dropout(rng.gen());
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_exits(&self) -> usize {
        self.heads.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// 1-based block index after which each head attaches.
    pub fn exit_positions(&self) -> &[usize] {
        &self.exit_positions
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.arch.sample_shape()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn heads(&self) -> &[ExitHead] {
        &self.heads
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn heads_mut(&mut self) -> &mut [ExitHead] {
        &mut self.heads
    }

    /// Per-sample input shape of every head.
    pub fn head_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.sample_shape();
        let mut after = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            shape = b.output_shape(&shape)?;
            after.push(shape.clone());
        }
        Ok(self
            .exit_positions
            .iter()
            .map(|&p| after[p - 1].clone())
            .collect())
    }

    /// Multiply-accumulates of one sample through each block.
    pub fn block_macs(&self) -> Result<Vec<u64>> {
        let mut shape = self.sample_shape();
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            out.push(b.macs(&shape)?);
            shape = b.output_shape(&shape)?;
        }
        Ok(out)
    }

    /// Multiply-accumulates of one sample through each head.
    pub fn head_macs(&self) -> Result<Vec<u64>> {
        self.head_input_shapes()?
            .iter()
            .zip(&self.heads)
            .map(|(s, h)| {
                let mut shape = s.clone();
                let mut total = 0;
                for l in &h.layers {
                    total += l.macs(&shape)?;
                    shape = l.output_shape(&shape)?;
                }
                Ok(total)
            })
            .collect()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in self
            .blocks
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut())
            .chain(self.heads.iter_mut().flat_map(|h| h.layers.iter_mut()))
        {
            if let Layer::Dropout(d) = layer {
                d.reseed(rng.gen());
            }
        }
    }

    /// Number of block forward passes since the last reset.
    pub fn block_executions(&self) -> usize {
        self.block_runs
    }

    pub fn reset_block_executions(&mut self) {
        self.block_runs = 0;
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let mut expected = vec![batch.rows()];
        expected.extend(self.sample_shape());
        batch.expect_shape("network input", &expected)
    }

    fn block_mode(&self, b: usize, mode: Mode) -> Mode {
        if self.frozen_blocks[b] {
            Mode::Eval
        } else {
            mode
        }
    }

    /// Runs block `b` (0-based). Frozen blocks always run in eval mode.
    pub fn forward_block(&mut self, b: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if b == 0 {
            self.check_batch(x)?;
        }
        let mode = self.block_mode(b, mode);
        self.block_runs += 1;
        self.blocks[b].forward(x, mode)
    }

    /// Runs head `e` (0-based) on the activation of its block; returns `(logits, probs)`.
    pub fn forward_head(&mut self, e: usize, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mode = if self.frozen_heads[e] { Mode::Eval } else { mode };
        self.heads[e].forward(x, mode)
    }

    /// One pass through the backbone producing every exit's output.
    pub fn forward_all_exits(&mut self, batch: &Tensor, mode: Mode) -> Result<ExitOutputs> {
        self.check_batch(batch)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut probs = Vec::with_capacity(self.heads.len());
        let mut h = batch.clone();
        let mut next_exit = 0;
        for b in 0..self.blocks.len() {
            h = self.forward_block(b, &h, mode)?;
            while next_exit < self.exit_positions.len() && self.exit_positions[next_exit] == b + 1 {
                let (z, p) = self.forward_head(next_exit, &h, mode)?;
                logits.push(z);
                probs.push(p);
                next_exit += 1;
            }
        }
        Ok(ExitOutputs { logits, probs })
    }

    /// Backpropagates per-exit logit gradients (`None` means no loss at that
    /// exit) through the heads and shared blocks of the last forward pass.
    /// Blocks deeper than the deepest contributing exit are never touched, and
    /// the pass stops once only frozen blocks remain below.
    pub fn backward(&mut self, logit_grads: &[Option<Tensor>]) -> Result<()> {
        if logit_grads.len() != self.heads.len() {
            return Err(Error::invalid(format!(
                "expected {} exit gradients, got {}",
                self.heads.len(),
                logit_grads.len()
            )));
        }
        let Some(deepest) = logit_grads.iter().rposition(Option::is_some) else {
            return Ok(());
        };
        let lowest_trainable = self.frozen_blocks.iter().position(|f| !f);
        let mut carry: Option<Tensor> = None;
        for b in (0..self.exit_positions[deepest]).rev() {
            for e in (0..=deepest).filter(|&e| self.exit_positions[e] == b + 1) {
                if let Some(g) = &logit_grads[e] {
                    let hg = self.heads[e].backward_from_logits(g)?;
                    match carry.as_mut() {
                        Some(c) => c.add_assign(&hg)?,
                        None => carry = Some(hg),
                    }
                }
            }
            let Some(g) = carry.take() else { continue };
            match lowest_trainable {
                Some(l) if b >= l => carry = Some(self.blocks[b].backward(&g)?),
                _ => break,
            }
        }
        Ok(())
    }

    pub fn set_block_frozen(&mut self, b: usize, frozen: bool) {
        self.frozen_blocks[b] = frozen;
    }

    pub fn set_head_frozen(&mut self, e: usize, frozen: bool) {
        self.frozen_heads[e] = frozen;
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen_blocks.iter_mut().for_each(|f| *f = false);
        self.frozen_heads.iter_mut().for_each(|f| *f = false);
    }

    pub fn is_block_frozen(&self, b: usize) -> bool {
        self.frozen_blocks[b]
    }

    /// All parameters in declaration order: blocks first, then heads.
    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()))
            .flat_map(Layer::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut())
            .chain(self.heads.iter_mut().flat_map(|h| h.layers.iter_mut()))
            .flat_map(Layer::params_mut)
            .collect()
    }

    /// Parameters of blocks and heads that are not frozen.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let fb = &self.frozen_blocks;
        let fh = &self.frozen_heads;
        self.blocks
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| !fb[*i])
            .flat_map(|(_, b)| b.layers.iter_mut())
            .chain(
                self.heads
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| !fh[*i])
                    .flat_map(|(_, h)| h.layers.iter_mut()),
            )
            .flat_map(Layer::params_mut)
            .collect()
    }

    /// Checkpointed state in declaration order: each layer's parameters
    /// followed by its buffers, blocks first, then heads.
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()))
            .flat_map(|l| {
                let mut v = l.params();
                v.extend(l.buffers());
                v
            })
            .collect()
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .blocks
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut())
            .chain(self.heads.iter_mut().flat_map(|h| h.layers.iter_mut()))
        {
            match l {
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                    out.push(&mut bn.running_mean);
                    out.push(&mut bn.running_var);
                }
                other => out.extend(other.params_mut()),
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp(seed: u64) -> MultiExitNetwork {
        build_mlp(
            MlpConfig {
                input_dim: 6,
                width: 8,
                num_classes: 4,
                depth: 5,
                exit_positions: vec![1, 3, 5],
                dropout: 0.2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn default_mlp_layout() {
        let net = build_mlp(MlpConfig::default(), 0).unwrap();
        assert_eq!(net.num_exits(), 3);
        assert_eq!(net.exit_positions(), &[1, 3, 5]);
        assert_eq!(net.heads()[0].param_count(), 256 * 16 + 16);
        // the last block has no dropout
        assert!(!net.blocks()[4]
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout(_))));
        assert!(net.blocks()[0]
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout(_))));
    }

    #[test]
    fn default_cnn_layout() {
        let net = build_cnn(CnnConfig::default(), 0).unwrap();
        assert_eq!(net.num_exits(), 3);
        let shapes = net.head_input_shapes().unwrap();
        assert_eq!(shapes, vec![vec![32, 14, 14], vec![64, 7, 7], vec![128, 3, 3]]);
    }

    #[test]
    fn cnn_rejects_wrong_image_size() {
        let mut net = build_cnn(
            CnnConfig {
                widths: vec![2, 2, 2],
                ..CnnConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(net
            .forward_all_exits(&Tensor::zeros(&[1, 1, 32, 32]), Mode::Eval)
            .is_err());
        let out = net
            .forward_all_exits(&Tensor::zeros(&[2, 1, 28, 28]), Mode::Eval)
            .unwrap();
        for e in 0..3 {
            for i in 0..2 {
                let s: f64 = out.prob(i, e).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_exit_layouts_rejected() {
        for exits in [vec![1], vec![2, 2, 5], vec![1, 3, 4], vec![0, 5]] {
            let cfg = MlpConfig {
                exit_positions: exits,
                ..MlpConfig::default()
            };
            assert!(build_mlp(cfg, 0).is_err());
        }
    }

    #[test]
    fn zero_input_gives_valid_distributions() {
        let mut net = build_mlp(MlpConfig::default(), 3).unwrap();
        let out = net
            .forward_all_exits(&Tensor::zeros(&[1, 200]), Mode::Eval)
            .unwrap();
        assert_eq!(out.num_exits(), 3);
        for e in 0..3 {
            let s: f64 = out.prob(0, e).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn output_shape_contract() {
        let mut net = small_mlp(1);
        let x = Tensor::from_fn(&[5, 6], |i| (i as f64).sin());
        let out = net.forward_all_exits(&x, Mode::Train).unwrap();
        assert_eq!(out.batch_size(), 5);
        assert_eq!(out.probs.len(), 3);
        assert!(out.probs.iter().all(|p| p.shape() == [5, 4]));
    }

    #[test]
    fn each_block_runs_once_per_forward() {
        let mut net = small_mlp(2);
        let x = Tensor::from_fn(&[3, 6], |i| i as f64 * 0.1);
        net.forward_all_exits(&x, Mode::Eval).unwrap();
        assert_eq!(net.block_executions(), 5);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = small_mlp(4);
        let x = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.37).cos());
        let a = net.forward_all_exits(&x, Mode::Eval).unwrap();
        let b = net.forward_all_exits(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    fn block_grad_nonzero(net: &MultiExitNetwork, b: usize) -> bool {
        net.blocks()[b]
            .layers
            .iter()
            .flat_map(Layer::params)
            .any(|p| p.grad().unwrap().iter().any(|&g| g != 0.0))
    }

    #[test]
    fn gradient_reach_follows_topology() {
        let x = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.37).cos());
        let g = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.11).sin());

        let mut net = small_mlp(5);
        net.forward_all_exits(&x, Mode::Train).unwrap();
        net.backward(&[None, None, Some(g.clone())]).unwrap();
        assert!(block_grad_nonzero(&net, 0));

        let mut net = small_mlp(5);
        net.forward_all_exits(&x, Mode::Train).unwrap();
        net.backward(&[Some(g.clone()), None, None]).unwrap();
        assert!(block_grad_nonzero(&net, 0));
        for b in 1..5 {
            assert!(!block_grad_nonzero(&net, b), "block {b}");
        }

        let mut net = small_mlp(5);
        net.forward_all_exits(&x, Mode::Train).unwrap();
        net.backward(&[None, Some(g), None]).unwrap();
        assert!(block_grad_nonzero(&net, 2));
        assert!(!block_grad_nonzero(&net, 3) && !block_grad_nonzero(&net, 4));
    }

    #[test]
    fn frozen_prefix_stops_backward() {
        let x = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.37).cos());
        let g = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.11).sin());
        let mut net = small_mlp(6);
        net.set_block_frozen(0, true);
        net.forward_all_exits(&x, Mode::Train).unwrap();
        net.backward(&[None, Some(g), None]).unwrap();
        assert!(!block_grad_nonzero(&net, 0));
        assert!(block_grad_nonzero(&net, 1));
        assert_eq!(net.trainable_params_mut().len(), net.params().len() - 4);
    }
}
