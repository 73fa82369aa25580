//! Transformer-UNet assembly: encoder, decoder, skips and bi-level connections.
//!
//! Level `l` runs at `1/2^l` of the input resolution with `level_widths[l]`
//! channels. Each encoder level `l < 3` ends in a down block whose `y_same`
//! feeds the skip and the pooling path, and whose `y_cross` joins the pooled
//! features at level `l + 1`. Each decoder level `l > 0` ends in an up block
//! whose `y_cross` joins the skip concatenation at level `l - 1`.

use std::collections::HashMap;

use ndarray::{Array1, Array5, ArrayD, Axis, Ix5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::transformer::{
    block_on_tape, effective_patch, he_kernel, BlockVars, PathMode, TransformerBlockParams,
    BLOCK_TENSOR_NAMES,
};
use crate::volume::{Shape3, Volume};
use crate::warp::DisplacementField;

pub const LEVELS: usize = 4;
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TUNetConfig {
    pub in_channels: usize,
    pub level_widths: Vec<usize>,
    pub block_patch_sizes: Vec<usize>,
    pub block_heads: Vec<usize>,
}

impl Default for TUNetConfig {
    fn default() -> Self {
        TUNetConfig {
            in_channels: 2,
            level_widths: vec![16, 32, 32, 32],
            block_patch_sizes: vec![4; LEVELS],
            block_heads: vec![4; LEVELS],
        }
    }
}

impl TUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels != 2 {
            return bad(format!("in_channels must be 2, got {}", self.in_channels));
        }
        for (name, v) in [
            ("level_widths", &self.level_widths),
            ("block_patch_sizes", &self.block_patch_sizes),
            ("block_heads", &self.block_heads),
        ] {
            if v.len() != LEVELS {
                return bad(format!("{name} needs {LEVELS} entries, got {}", v.len()));
            }
            if v.contains(&0) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        for l in 0..LEVELS {
            // Heads must split the embedding at every effective patch size, including 1.
            if self.level_widths[l] % self.block_heads[l] != 0 {
                return bad(format!(
                    "level {l}: {} heads do not divide width {}",
                    self.block_heads[l], self.level_widths[l]
                ));
            }
        }
        Ok(())
    }

    /// Spatial shape at each level for a given input.
    pub fn level_shapes(&self, input: Shape3) -> Result<[Shape3; LEVELS]> {
        check_input_shape(input)?;
        Ok(std::array::from_fn(|l| input.map(|d| d >> l)))
    }
}

pub fn check_input_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&d| d == 0 || d % DOWNSAMPLE != 0) {
        return Err(Error::IndivisibleShape {
            shape: shape.to_vec(),
            divisor: DOWNSAMPLE,
        });
    }
    Ok(())
}

/// Named parameter tensors in construction order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, ArrayD<f64>)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        ModelParams { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    fn push(&mut self, name: String, t: ArrayD<f64>) {
        self.names.push(name);
        self.tensors.push(t);
    }
}

pub fn parameter_count(params: &ModelParams) -> usize {
    params.tensors.iter().map(|t| t.len()).sum()
}

pub const FIELD_HEAD: &str = "head";

/// The conv layers: `(name, c_in, c_out, kernel)`.
fn conv_layers(cfg: &TUNetConfig) -> Vec<(String, usize, usize, usize)> {
    let w = &cfg.level_widths;
    let mut out = vec![
        ("enc0.conv1".to_string(), cfg.in_channels, w[0], 3),
        ("enc0.conv2".to_string(), w[0], w[0], 3),
    ];
    for l in 1..LEVELS {
        out.push((format!("enc{l}.conv"), 2 * w[l - 1], w[l], 3));
    }
    for l in (0..LEVELS - 1).rev() {
        out.push((format!("dec{l}.up"), w[l + 1], w[l], 3));
        out.push((format!("dec{l}.conv1"), 2 * w[l] + w[l + 1], w[l], 3));
    }
    out.push(("dec0.conv2".to_string(), w[0], w[0], 3));
    out
}

/// The transformer blocks: `(name, level, mode)`.
fn block_layers() -> Vec<(String, usize, PathMode)> {
    let mut out: Vec<_> = (0..LEVELS - 1)
        .map(|l| (format!("enc{l}.block"), l, PathMode::Down))
        .collect();
    out.extend((1..LEVELS).rev().map(|l| (format!("dec{l}.block"), l, PathMode::Up)));
    out
}

/// Deterministic initialization; the field head starts at zero.
pub fn build_model(config: &TUNetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::default();
    for (name, cin, cout, k) in conv_layers(config) {
        let w = he_kernel([cout, cin, k, k, k], cin * k * k * k, &mut rng);
        params.push(format!("{name}.w"), w.into_dyn());
        params.push(format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
    }
    for (name, level, mode) in block_layers() {
        let block = TransformerBlockParams::init(
            config.level_widths[level],
            config.block_patch_sizes[level],
            config.block_heads[level],
            mode,
            &mut rng,
        )?;
        for (t, tensor) in BLOCK_TENSOR_NAMES.iter().zip(block.tensors()) {
            params.push(format!("{name}.{t}"), tensor);
        }
    }
    let w0 = config.level_widths[0];
    params.push(
        format!("{FIELD_HEAD}.w"),
        Array5::<f64>::zeros((3, w0, 1, 1, 1)).into_dyn(),
    );
    params.push(format!("{FIELD_HEAD}.b"), Array1::<f64>::zeros(3).into_dyn());
    Ok(params)
}

/// Checks that `params` has exactly the tensors `config` builds, with matching shapes.
pub fn check_params(config: &TUNetConfig, params: &ModelParams) -> Result<()> {
    let reference = build_model(config, 0)?;
    if reference.names != params.names {
        return Err(Error::ShapeMismatch(
            "parameter names do not match the model configuration".into(),
        ));
    }
    for ((n, a), b) in reference.names.iter().zip(&reference.tensors).zip(&params.tensors) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{n}: expected {:?}, found {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Shapes observed during one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub bottleneck: Vec<usize>,
    /// `(block name, input, y_same, y_cross)` shapes.
    pub blocks: Vec<(String, Vec<usize>, Vec<usize>, Vec<usize>)>,
}

/// Records the network on `tape`. `input` is `(B, 2, H, W, D)`; `vars` are the
/// parameter handles in [`ModelParams`] order. Returns the `(B, 3, H, W, D)` field.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &TUNetConfig,
    params: &ModelParams,
    vars: &[Var],
    input: Var,
) -> Result<(Var, ForwardTrace)> {
    let index: HashMap<&str, Var> = params
        .names
        .iter()
        .map(String::as_str)
        .zip(vars.iter().copied())
        .collect();
    let p = |name: String| -> Var { index[name.as_str()] };
    let mut trace = ForwardTrace::default();

    let conv = |tape: &mut Tape, x: Var, name: &str, relu: bool| -> Result<Var> {
        let pad = tape_kernel(params, name) / 2;
        let y = tape.conv3d(x, p(format!("{name}.w")), Some(p(format!("{name}.b"))), 1, pad)?;
        Ok(if relu { tape.relu(y) } else { y })
    };
    let block = |tape: &mut Tape, trace: &mut ForwardTrace, x: Var, name: &str, level: usize, mode| {
        let shape = tape.value(x).shape().to_vec();
        let spatial = [shape[2], shape[3], shape[4]];
        let patch = effective_patch(spatial, config.block_patch_sizes[level]);
        let handles: Vec<Var> = BLOCK_TENSOR_NAMES
            .iter()
            .map(|t| p(format!("{name}.{t}")))
            .collect();
        let (same, cross) = block_on_tape(
            tape,
            x,
            &BlockVars::from_slice(&handles),
            patch,
            config.block_heads[level],
            mode,
        )?;
        trace.blocks.push((
            name.to_string(),
            shape,
            tape.value(same).shape().to_vec(),
            tape.value(cross).shape().to_vec(),
        ));
        Ok::<_, Error>((same, cross))
    };

    let x = conv(tape, input, "enc0.conv1", true)?;
    let mut e = conv(tape, x, "enc0.conv2", true)?;
    let mut skips = Vec::with_capacity(LEVELS - 1);
    for l in 0..LEVELS - 1 {
        let (same, cross) = block(tape, &mut trace, e, &format!("enc{l}.block"), l, PathMode::Down)?;
        skips.push(same);
        let pooled = tape.max_pool2(same)?;
        let joined = tape.concat(&[pooled, cross])?;
        e = conv(tape, joined, &format!("enc{}.conv", l + 1), true)?;
    }
    trace.bottleneck = tape.value(e).shape().to_vec();

    let top = LEVELS - 1;
    let (mut z, mut cross) = block(tape, &mut trace, e, &format!("dec{top}.block"), top, PathMode::Up)?;
    let mut g = z;
    for l in (0..top).rev() {
        let up = tape.upsample2(z);
        let up = conv(tape, up, &format!("dec{l}.up"), true)?;
        let joined = tape.concat(&[up, skips[l], cross])?;
        g = conv(tape, joined, &format!("dec{l}.conv1"), true)?;
        if l > 0 {
            (z, cross) = block(tape, &mut trace, g, &format!("dec{l}.block"), l, PathMode::Up)?;
        }
    }
    let g = conv(tape, g, "dec0.conv2", true)?;
    let field = tape.conv3d(
        g,
        p(format!("{FIELD_HEAD}.w")),
        Some(p(format!("{FIELD_HEAD}.b"))),
        1,
        0,
    )?;
    Ok((field, trace))
}

fn tape_kernel(params: &ModelParams, name: &str) -> usize {
    params
        .get(&format!("{name}.w"))
        .map(|w| w.shape()[2])
        .unwrap_or(3)
}

/// Stacks moving and fixed into a `(1, 2, H, W, D)` input.
pub fn stack_input(moving: &Volume, fixed: &Volume) -> Result<Array5<f64>> {
    if moving.shape() != fixed.shape() {
        return Err(Error::ShapeMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.shape(),
            fixed.shape()
        )));
    }
    check_input_shape(moving.shape())?;
    let [h, w, d] = moving.shape();
    let mut x = Array5::zeros((1, 2, h, w, d));
    x.index_axis_mut(Axis(1), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(moving.data());
    x.index_axis_mut(Axis(1), 1)
        .index_axis_mut(Axis(0), 0)
        .assign(fixed.data());
    Ok(x)
}

/// Inference pass with its shape trace.
pub fn forward_traced(
    config: &TUNetConfig,
    params: &ModelParams,
    moving: &Volume,
    fixed: &Volume,
) -> Result<(DisplacementField, ForwardTrace)> {
    let input = stack_input(moving, fixed)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let x = tape.constant(input.into_dyn());
    let (field, trace) = forward_on_tape(&mut tape, config, params, &vars, x)?;
    let u = tape
        .value(field)
        .view()
        .into_dimensionality::<Ix5>()
        .expect("field is 5D")
        .index_axis(Axis(0), 0)
        .to_owned();
    Ok((DisplacementField::new(u)?, trace))
}

pub fn forward(
    config: &TUNetConfig,
    params: &ModelParams,
    moving: &Volume,
    fixed: &Volume,
) -> Result<DisplacementField> {
    forward_traced(config, params, moving, fixed).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::warp_trilinear;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny() -> TUNetConfig {
        TUNetConfig {
            level_widths: vec![4, 8, 8, 8],
            block_patch_sizes: vec![4, 2, 2, 2],
            block_heads: vec![2, 2, 2, 2],
            ..TUNetConfig::default()
        }
    }

    fn random_volume(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_array(Array3::from_shape_simple_fn(shape, || rng.gen_range(0.0..1.0))).unwrap()
    }

    /// Sum of weight-shape products, written out per layer.
    fn count_oracle(w: [usize; 4]) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + cout;
        let block = |c: usize, path_k: usize| 3 * conv(c, c, 3) + c * c * path_k.pow(3) + c + 4 * c;
        let mut n = conv(2, w[0], 3) + conv(w[0], w[0], 3);
        n += conv(2 * w[0], w[1], 3) + conv(2 * w[1], w[2], 3) + conv(2 * w[2], w[3], 3);
        n += block(w[0], 3) + block(w[1], 3) + block(w[2], 3);
        n += block(w[3], 2) + block(w[2], 2) + block(w[1], 2);
        n += conv(w[3], w[2], 3) + conv(2 * w[2] + w[3], w[2], 3);
        n += conv(w[2], w[1], 3) + conv(2 * w[1] + w[2], w[1], 3);
        n += conv(w[1], w[0], 3) + conv(2 * w[0] + w[1], w[0], 3);
        n + conv(w[0], w[0], 3) + conv(w[0], 3, 1)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(&ModelParams::default()), 0);
        let single = ModelParams::from_named(vec![
            ("w".into(), ArrayD::zeros(vec![16, 2, 3, 3, 3])),
            ("b".into(), ArrayD::zeros(vec![16])),
        ]);
        assert_eq!(parameter_count(&single), 880);
        let p = build_model(&TUNetConfig::default(), 0).unwrap();
        assert_eq!(parameter_count(&p), count_oracle([16, 32, 32, 32]));
        assert_eq!(parameter_count(&p), 939_587);
        let t = build_model(&tiny(), 0).unwrap();
        assert_eq!(parameter_count(&t), count_oracle([4, 8, 8, 8]));
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(&TUNetConfig::default(), 0).unwrap();
        let b = build_model(&TUNetConfig::default(), 0).unwrap();
        assert_eq!(bincode::serialize(&a).unwrap(), bincode::serialize(&b).unwrap());
        assert_ne!(a, build_model(&TUNetConfig::default(), 1).unwrap());
        assert!(a.get("head.w").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TUNetConfig { level_widths: vec![16, 32, 32], ..TUNetConfig::default() },
            TUNetConfig { in_channels: 3, ..TUNetConfig::default() },
            TUNetConfig { block_heads: vec![3, 4, 4, 4], ..TUNetConfig::default() },
            TUNetConfig { block_patch_sizes: vec![0, 4, 4, 4], ..TUNetConfig::default() },
        ] {
            assert!(matches!(build_model(&cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn fresh_model_is_identity() {
        let cfg = tiny();
        let params = build_model(&cfg, 3).unwrap();
        let m = random_volume([16, 16, 16], 1);
        let f = random_volume([16, 16, 16], 2);
        let (field, trace) = forward_traced(&cfg, &params, &m, &f).unwrap();
        assert_eq!(field.shape(), [16, 16, 16]);
        assert_eq!(field.max_norm(), 0.0);
        assert_eq!(trace.bottleneck, vec![1, 8, 2, 2, 2]);
        let warped = warp_trilinear(&m, &field).unwrap();
        for (a, b) in warped.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn block_outputs_cross_levels() {
        let cfg = tiny();
        let params = build_model(&cfg, 3).unwrap();
        let m = random_volume([16, 8, 24], 1);
        let (_, trace) = forward_traced(&cfg, &params, &m, &m).unwrap();
        assert_eq!(trace.blocks.len(), 6);
        for (name, input, same, cross) in &trace.blocks {
            assert_eq!(input, same, "{name}");
            let factor = |a: usize, b: usize| (b as f64) / (a as f64);
            let want = if name.starts_with("enc") { 0.5 } else { 2.0 };
            for a in 2..5 {
                assert_eq!(factor(input[a], cross[a]), want, "{name}");
            }
        }
    }

    #[test]
    fn head_is_linear() {
        let cfg = tiny();
        let mut params = build_model(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in ["head.w", "head.b"] {
            params.get_mut(t).unwrap().mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        }
        let m = random_volume([16, 16, 16], 1);
        let f = random_volume([16, 16, 16], 2);
        let u1 = forward(&cfg, &params, &m, &f).unwrap();
        for t in ["head.w", "head.b"] {
            params.get_mut(t).unwrap().mapv_inplace(|v| 2.0 * v);
        }
        let u2 = forward(&cfg, &params, &m, &f).unwrap();
        assert_eq!(u2, u1.scaled(2.0));
        assert_eq!(forward(&cfg, &params, &m, &f).unwrap(), u2);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny();
        let params = build_model(&cfg, 0).unwrap();
        let a = random_volume([16, 16, 16], 1);
        let b = random_volume([16, 16, 8], 1);
        assert!(matches!(forward(&cfg, &params, &a, &b), Err(Error::ShapeMismatch(_))));
        let c = random_volume([12, 16, 16], 1);
        assert!(matches!(forward(&cfg, &params, &c, &c), Err(Error::IndivisibleShape { .. })));
        assert!(check_params(&TUNetConfig::default(), &params).is_err());
        assert!(check_params(&cfg, &params).is_ok());
    }
}
