//! Declarative encoder/decoder specification and forward execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conv::conv_out_size;
use crate::error::{DsrcError, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu_after: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_hw: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub input_hw: (usize, usize),
    pub input_channels: usize,
}

fn conv(inc: usize, outc: usize, k: usize, s: usize, p: usize, relu: bool) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        in_channels: inc,
        out_channels: outc,
        kernel: k,
        stride: s,
        pad: p,
        relu_after: relu,
        target_hw: None,
    }
}

fn deconv(inc: usize, outc: usize, k: usize, s: usize, p: usize, relu: bool, target: (usize, usize)) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Deconv,
        in_channels: inc,
        out_channels: outc,
        kernel: k,
        stride: s,
        pad: p,
        relu_after: relu,
        target_hw: Some(target),
    }
}

/// The stock 32x32 single-channel architecture: four strided conv layers down
/// to 30 channels at 4x4 (d_z = 480) and three transposed-conv layers back to
/// 32x32. The last decoder layer is linear so reconstruction residuals can be
/// signed.
pub fn default_spec() -> NetworkSpec {
    NetworkSpec {
        encoder: vec![
            conv(1, 10, 5, 2, 1, true),
            conv(10, 20, 3, 2, 1, true),
            conv(20, 30, 3, 1, 0, true),
            conv(30, 30, 3, 1, 0, true),
        ],
        decoder: vec![
            deconv(30, 30, 3, 1, 0, true, (6, 6)),
            deconv(30, 20, 3, 2, 1, true, (15, 15)),
            deconv(20, 1, 5, 2, 1, false, (32, 32)),
        ],
        input_hw: (32, 32),
        input_channels: 1,
    }
}

impl NetworkSpec {
    /// Spatial sizes after each encoder layer, starting from the input.
    pub fn encoder_chain(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut chain = vec![(self.input_channels, self.input_hw.0, self.input_hw.1)];
        for (i, layer) in self.encoder.iter().enumerate() {
            let (c, h, w) = *chain.last().unwrap();
            if layer.in_channels != c {
                return Err(DsrcError::InvalidShape(format!(
                    "encoder layer {i}: expects {} input channels but gets {c}",
                    layer.in_channels
                )));
            }
            let oh = conv_out_size(h, layer.kernel, layer.stride, layer.pad).ok_or_else(|| {
                DsrcError::InvalidShape(format!("encoder layer {i}: kernel does not fit input"))
            })?;
            let ow = conv_out_size(w, layer.kernel, layer.stride, layer.pad).ok_or_else(|| {
                DsrcError::InvalidShape(format!("encoder layer {i}: kernel does not fit input"))
            })?;
            chain.push((layer.out_channels, oh, ow));
        }
        Ok(chain)
    }

    /// Flattened feature count per sample at the encoder output.
    pub fn embedding_dim(&self) -> Result<usize> {
        let (c, h, w) = *self.encoder_chain()?.last().unwrap();
        Ok(c * h * w)
    }

    pub fn embedding_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(*self.encoder_chain()?.last().unwrap())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<NetworkSpec> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    pub kernels: Vec<Parameter>,
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub kernels: Vec<Parameter>,
}

fn init_kernel(rng: &mut ChaCha8Rng, name: &str, shape: &[usize], fan_in: usize) -> Parameter {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Parameter::new(name, Tensor::from_vec(shape, data).unwrap())
}

/// Fan-in-scaled uniform initialization, deterministic in the seed.
/// Conv kernels are (Cout,Cin,k,k); deconv kernels are (Cin,Cout,k,k).
pub fn init_params(spec: &NetworkSpec, seed: u64) -> (EncoderState, DecoderState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = spec
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            init_kernel(
                &mut rng,
                &format!("encoder.{i}"),
                &[l.out_channels, l.in_channels, l.kernel, l.kernel],
                fan_in,
            )
        })
        .collect();
    let dec = spec
        .decoder
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            init_kernel(
                &mut rng,
                &format!("decoder.{i}"),
                &[l.in_channels, l.out_channels, l.kernel, l.kernel],
                fan_in,
            )
        })
        .collect();
    (EncoderState { kernels: enc }, DecoderState { kernels: dec })
}

/// Run the encoder on a batch (N,C,H,W) and flatten per-sample activations
/// into columns: the result is (d_z, N) with input order preserved.
pub fn encode(g: &mut Graph, spec: &NetworkSpec, state: &EncoderState, x: Var) -> Result<Var> {
    let shape = g.value(x).shape.clone();
    if shape.len() != 4
        || shape[1] != spec.input_channels
        || (shape[2], shape[3]) != spec.input_hw
    {
        return Err(DsrcError::InvalidShape(format!(
            "encode: expected (N,{},{},{}), got {:?}",
            spec.input_channels, spec.input_hw.0, spec.input_hw.1, shape
        )));
    }
    let mut cur = x;
    for (layer, kernel) in spec.encoder.iter().zip(&state.kernels) {
        let k = g.param(kernel);
        cur = g.conv2d(cur, k, layer.stride, layer.pad)?;
        if layer.relu_after {
            cur = g.relu(cur);
        }
    }
    g.features_to_cols(cur)
}

/// Map embedding columns (d_z, N) back to images (N,C,H,W).
pub fn decode(g: &mut Graph, spec: &NetworkSpec, state: &DecoderState, z: Var) -> Result<Var> {
    let (c, h, w) = spec.embedding_shape()?;
    let (d, _) = g.value(z).dims2()?;
    if d != c * h * w {
        return Err(DsrcError::InvalidShape(format!(
            "decode: embedding dimension {d} does not match spec ({})",
            c * h * w
        )));
    }
    let mut cur = g.cols_to_features(z, c, h, w)?;
    for (layer, kernel) in spec.decoder.iter().zip(&state.kernels) {
        let k = g.param(kernel);
        let target = layer.target_hw.ok_or_else(|| {
            DsrcError::InvalidShape("decode: deconv layer without target_hw".into())
        })?;
        cur = g.transposed_conv2d(cur, k, layer.stride, layer.pad, target)?;
        if layer.relu_after {
            cur = g.relu(cur);
        }
    }
    Ok(cur)
}

/// Non-recording convenience forward through the encoder.
pub fn encode_tensor(spec: &NetworkSpec, state: &EncoderState, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let z = encode(&mut g, spec, state, xv)?;
    Ok(g.value(z).clone())
}

pub fn decode_tensor(spec: &NetworkSpec, state: &DecoderState, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let x = decode(&mut g, spec, state, zv)?;
    Ok(g.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_is_32_15_8_6_4() {
        let spec = default_spec();
        let chain = spec.encoder_chain().unwrap();
        let sizes: Vec<usize> = chain.iter().map(|(_, h, _)| *h).collect();
        assert_eq!(sizes, vec![32, 15, 8, 6, 4]);
        assert_eq!(spec.embedding_dim().unwrap(), 480);
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = default_spec();
        let json = spec.to_json().unwrap();
        let back = NetworkSpec::from_json(&json).unwrap();
        assert_eq!(back.encoder.len(), 4);
        assert_eq!(back.decoder[2].target_hw, Some((32, 32)));
        assert_eq!(back.embedding_dim().unwrap(), 480);
    }

    #[test]
    fn encode_shape_and_zero_input() {
        let spec = default_spec();
        let (enc, _) = init_params(&spec, 3);
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let z = encode_tensor(&spec, &enc, &x).unwrap();
        assert_eq!(z.shape, vec![480, 2]);
        assert!(z.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_restores_input_shape() {
        let spec = default_spec();
        let (enc, dec) = init_params(&spec, 3);
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let z = encode_tensor(&spec, &enc, &x).unwrap();
        let xhat = decode_tensor(&spec, &dec, &z).unwrap();
        assert_eq!(xhat.shape, x.shape);
    }

    #[test]
    fn encode_is_column_separable() {
        let spec = default_spec();
        let (enc, _) = init_params(&spec, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..3 * 1024).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(&[3, 1, 32, 32], data).unwrap();
        let z = encode_tensor(&spec, &enc, &x).unwrap();
        for s in 0..3 {
            let xi = Tensor::from_vec(&[1, 1, 32, 32], x.data[s * 1024..(s + 1) * 1024].to_vec()).unwrap();
            let zi = encode_tensor(&spec, &enc, &xi).unwrap();
            for f in 0..480 {
                assert_eq!(zi.data[f], z.data[f * 3 + s]);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = default_spec();
        let (a, _) = init_params(&spec, 42);
        let (b, _) = init_params(&spec, 42);
        let (c, _) = init_params(&spec, 43);
        assert_eq!(a.kernels[0].value().data, b.kernels[0].value().data);
        assert_ne!(a.kernels[0].value().data, c.kernels[0].value().data);
    }

    #[test]
    fn init_std_matches_scheme() {
        // one large kernel, >= 1e4 elements
        let spec = NetworkSpec {
            encoder: vec![conv(50, 50, 3, 1, 1, true)],
            decoder: vec![],
            input_hw: (8, 8),
            input_channels: 50,
        };
        let (enc, _) = init_params(&spec, 1);
        let v = enc.kernels[0].value();
        let n = v.data.len() as f64;
        assert!(v.data.len() >= 10_000);
        let mean: f64 = v.data.iter().sum::<f64>() / n;
        let var: f64 = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let fan_in: f64 = 50.0 * 9.0;
        let target = (1.0 / fan_in.sqrt()) / 3.0f64.sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.1);
    }

    #[test]
    fn parameter_count_matches_spec() {
        let spec = default_spec();
        let (enc, dec) = init_params(&spec, 0);
        let count: usize = enc
            .kernels
            .iter()
            .chain(&dec.kernels)
            .map(|p| p.value().numel())
            .sum();
        let expect: usize = spec
            .encoder
            .iter()
            .chain(&spec.decoder)
            .map(|l| l.in_channels * l.out_channels * l.kernel * l.kernel)
            .sum();
        assert_eq!(count, expect);
    }
}
