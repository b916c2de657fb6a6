//! Post-norm Transformer encoder with multi-head scaled dot-product
//! self-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 4,
            d_model: 256,
            d_ff: 1024,
            dropout: 0.2,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Per-head key/value width.
    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return Err(Error::Config("d_model must be at least 2 and d_ff positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

fn layer_names(layer: usize) -> impl Fn(&str) -> String {
    move |suffix: &str| format!("encoder.layer{layer}.{suffix}")
}

impl EncoderLayerParams {
    /// Glorot projections, zero biases, unit layer-norm gains.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        layer: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let name = layer_names(layer);
        let (d, dh) = (config.d_model, config.d_head());
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            heads.push(HeadParams {
                wq: store.add(name(&format!("head{h}.wq")), Tensor::glorot(d, dh, rng), false)?,
                wk: store.add(name(&format!("head{h}.wk")), Tensor::glorot(d, dh, rng), false)?,
                wv: store.add(name(&format!("head{h}.wv")), Tensor::glorot(d, dh, rng), false)?,
            });
        }
        Ok(Self {
            heads,
            wo: store.add(name("wo"), Tensor::glorot(config.num_heads * dh, d, rng), false)?,
            ffn_w1: store.add(name("ffn.w1"), Tensor::glorot(d, config.d_ff, rng), false)?,
            ffn_b1: store.add(name("ffn.b1"), Tensor::zeros(&[config.d_ff]), false)?,
            ffn_w2: store.add(name("ffn.w2"), Tensor::glorot(config.d_ff, d, rng), false)?,
            ffn_b2: store.add(name("ffn.b2"), Tensor::zeros(&[d]), false)?,
            ln1_gain: store.add(name("ln1.gain"), Tensor::filled(&[d], 1.0), false)?,
            ln1_bias: store.add(name("ln1.bias"), Tensor::zeros(&[d]), false)?,
            ln2_gain: store.add(name("ln2.gain"), Tensor::filled(&[d], 1.0), false)?,
            ln2_bias: store.add(name("ln2.bias"), Tensor::zeros(&[d]), false)?,
        })
    }

    pub fn resolve(store: &ParamStore, config: &EncoderConfig, layer: usize) -> Result<Self, Error> {
        let name = layer_names(layer);
        let get = |s: &str| crate::model::lookup(store, &name(s));
        let heads = (0..config.num_heads)
            .map(|h| {
                Ok(HeadParams {
                    wq: get(&format!("head{h}.wq"))?,
                    wk: get(&format!("head{h}.wk"))?,
                    wv: get(&format!("head{h}.wv"))?,
                })
            })
            .collect::<Result<_, Error>>()?;
        Ok(Self {
            heads,
            wo: get("wo")?,
            ffn_w1: get("ffn.w1")?,
            ffn_b1: get("ffn.b1")?,
            ffn_w2: get("ffn.w2")?,
            ffn_b2: get("ffn.b2")?,
            ln1_gain: get("ln1.gain")?,
            ln1_bias: get("ln1.bias")?,
            ln2_gain: get("ln2.gain")?,
            ln2_bias: get("ln2.bias")?,
        })
    }
}

/// Dropout source for training-mode forward passes.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

pub(crate) fn maybe_dropout<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    x: Var,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var, NumericError> {
    match dropout {
        Some(d) => g.dropout(x, d.rate, d.rng),
        None => Ok(x),
    }
}

pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V`. Keys at index `valid` and beyond are
/// padding and receive zero weight.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, valid: usize) -> Result<Attention, NumericError> {
    let d_k = g.value(q).cols();
    if g.value(k).rows() != g.value(v).rows() {
        return Err(NumericError::ShapeMismatch {
            op: "attention",
            left: g.value(k).shape().to_vec(),
            right: g.value(v).shape().to_vec(),
        });
    }
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows_masked(scores, valid)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// `layer-norm(H + dropout(concat(heads) W^O))`.
pub fn multi_head<'a, R: Rng + ?Sized>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    layer: &EncoderLayerParams,
    config: &EncoderConfig,
    h: Var,
    valid: usize,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var, NumericError> {
    let mut outputs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let wq = g.param(store, head.wq);
        let wk = g.param(store, head.wk);
        let wv = g.param(store, head.wv);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        outputs.push(scaled_dot_attention(g, q, k, v, valid)?.output);
    }
    let cat = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs)? };
    let wo = g.param(store, layer.wo);
    let projected = g.matmul(cat, wo)?;
    let projected = maybe_dropout(g, projected, dropout)?;
    let residual = g.add(h, projected)?;
    let gain = g.param(store, layer.ln1_gain);
    let bias = g.param(store, layer.ln1_bias);
    g.layer_norm(residual, gain, bias, config.layer_norm_eps)
}

/// Position-wise `ReLU(Z W1 + b1) W2 + b2`.
pub fn feed_forward<'a>(g: &mut Graph<'a>, store: &'a ParamStore, layer: &EncoderLayerParams, z: Var) -> Result<Var, NumericError> {
    let w1 = g.param(store, layer.ffn_w1);
    let b1 = g.param(store, layer.ffn_b1);
    let w2 = g.param(store, layer.ffn_w2);
    let b2 = g.param(store, layer.ffn_b2);
    let hidden = g.affine(z, w1, b1)?;
    let hidden = g.relu(hidden);
    g.affine(hidden, w2, b2)
}

/// One block: attention sublayer then `layer-norm(Z + dropout(FFN(Z)))`.
pub fn encoder_layer<'a, R: Rng + ?Sized>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    layer: &EncoderLayerParams,
    config: &EncoderConfig,
    h: Var,
    valid: usize,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var, NumericError> {
    let z = multi_head(g, store, layer, config, h, valid, dropout)?;
    let ffn = feed_forward(g, store, layer, z)?;
    let ffn = maybe_dropout(g, ffn, dropout)?;
    let residual = g.add(z, ffn)?;
    let gain = g.param(store, layer.ln2_gain);
    let bias = g.param(store, layer.ln2_bias);
    g.layer_norm(residual, gain, bias, config.layer_norm_eps)
}

/// Runs the whole stack over `(T + 1) x d_model` input rows. Only the first
/// `valid` rows are real positions.
pub fn encode<'a, R: Rng + ?Sized>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    layers: &[EncoderLayerParams],
    config: &EncoderConfig,
    h0: Var,
    valid: usize,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<Var, NumericError> {
    let mut h = h0;
    for layer in layers {
        h = encoder_layer(g, store, layer, config, h, valid, dropout)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_config(heads: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_heads: heads,
            d_model: 8,
            d_ff: 16,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (n, d) = (q.rows(), q.cols());
        let mut out = Tensor::zeros(&[n, v.cols()]);
        for i in 0..n {
            let mut scores = vec![0.0; k.rows()];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..d {
                    *s += q.get(i, c) * k.get(j, c);
                }
                *s /= (d as f64).sqrt();
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - max).exp() / total;
                for c in 0..v.cols() {
                    out.row_mut(i)[c] += w * v.get(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let q = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
            let k = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
            let v = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
            let mut g = Graph::inference();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let att = scaled_dot_attention(&mut g, qv, kv, vv, 4).unwrap();
            let expected = naive_attention(&q, &k, &v);
            for (a, b) in g.value(att.output).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            for row in 0..4 {
                let s: f64 = g.value(att.weights).row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::from_rows(&vec![vec![0.3, -0.2]; 3]).unwrap();
        let v = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let out = scaled_dot_attention(&mut g, qv, kv, vv, 3).unwrap().output;
        for c in 0..2 {
            let mean = (0..3).map(|r| v.get(r, c)).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((g.value(out).get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_key_selects_its_value() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let mut g = Graph::inference();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let out = scaled_dot_attention(&mut g, qv, kv, vv, 3).unwrap().output;
        assert!((g.value(out).item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let att = scaled_dot_attention(&mut g, xv, xv, xv, 3).unwrap();
        for r in 0..5 {
            assert_eq!(&g.value(att.weights).row(r)[3..], &[0.0, 0.0]);
        }
    }

    fn one_layer(heads: usize, seed: u64) -> (ParamStore, EncoderLayerParams, EncoderConfig) {
        let config = small_config(heads);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = EncoderLayerParams::register(&mut store, &config, 0, &mut rng).unwrap();
        (store, layer, config)
    }

    fn zero(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_output_projection_leaves_layer_norm_of_input() {
        let (mut store, layer, config) = one_layer(2, 5);
        zero(&mut store, &[layer.wo]);
        let h = Tensor::uniform(&[4, 8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let z = multi_head::<ChaCha8Rng>(&mut g, &store, &layer, &config, hv, 4, &mut None).unwrap();
        let expected = crate::numeric::layer_norm(&h, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        assert_eq!(g.value(z).shape(), &[4, 8]);
        for (a, b) in g.value(z).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ffn_leaves_layer_norm_of_attention_output() {
        let (mut store, layer, config) = one_layer(2, 7);
        zero(&mut store, &[layer.ffn_w1, layer.ffn_w2]);
        let h = Tensor::uniform(&[4, 8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(8));
        let mut g = Graph::inference();
        let hv = g.constant(h);
        let z = multi_head::<ChaCha8Rng>(&mut g, &store, &layer, &config, hv, 4, &mut None).unwrap();
        let out = encoder_layer::<ChaCha8Rng>(&mut g, &store, &layer, &config, hv, 4, &mut None).unwrap();
        let zt = g.value(z).clone();
        let expected = crate::numeric::layer_norm(&zt, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for (a, b) in g.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn feed_forward_is_position_wise() {
        let (store, layer, _) = one_layer(2, 9);
        let z = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let perm = [2usize, 0, 3, 1];
        let zp = Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::inference();
        let (a, b) = (g.constant(z), g.constant(zp));
        let fa = feed_forward(&mut g, &store, &layer, a).unwrap();
        let fb = feed_forward(&mut g, &store, &layer, b).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(g.value(fb).row(new), g.value(fa).row(old));
        }
    }

    #[test]
    fn layers_stay_finite_and_shape_preserving() {
        let config = EncoderConfig { num_layers: 3, ..small_config(2) };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers: Vec<_> = (0..3)
            .map(|l| EncoderLayerParams::register(&mut store, &config, l, &mut rng).unwrap())
            .collect();
        let h = Tensor::uniform(&[6, 8], -10.0, 10.0, &mut rng);
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let out = encode::<ChaCha8Rng>(&mut g, &store, &layers, &config, hv, 6, &mut None).unwrap();
        assert_eq!(g.value(out).shape(), &[6, 8]);
        assert!(g.value(out).is_finite());
        let same = encode::<ChaCha8Rng>(&mut g, &store, &[], &config, hv, 6, &mut None).unwrap();
        assert_eq!(g.value(same), &h);
    }

    #[test]
    fn single_head_is_plain_attention_plus_projection() {
        let (store, layer, config) = one_layer(1, 12);
        let h = Tensor::uniform(&[3, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let mut g = Graph::inference();
        let hv = g.constant(h.clone());
        let z = multi_head::<ChaCha8Rng>(&mut g, &store, &layer, &config, hv, 3, &mut None).unwrap();

        let p = |id| store.get(id).clone();
        let q = crate::numeric::matmul(&h, &p(layer.heads[0].wq)).unwrap();
        let k = crate::numeric::matmul(&h, &p(layer.heads[0].wk)).unwrap();
        let v = crate::numeric::matmul(&h, &p(layer.heads[0].wv)).unwrap();
        let att = crate::numeric::matmul(&naive_attention(&q, &k, &v), &p(layer.wo)).unwrap();
        let mut res = h.clone();
        for (a, b) in res.data_mut().iter_mut().zip(att.data()) {
            *a += b;
        }
        let expected = crate::numeric::layer_norm(&res, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for (a, b) in g.value(z).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert_eq!(EncoderConfig::default().d_head(), 64);
        let bad = EncoderConfig { num_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
