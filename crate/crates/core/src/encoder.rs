//! Gated transformer encoder and the classifier/projection heads.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::input::{EmbeddedBatch, MASK_NEG};
use crate::model::{EncoderLayerParams, Model};
use crate::tensor::Tensor;

/// Multi-head self-attention over a padded `[(B * n) x d]` batch.
///
/// Scores are `Q K^T / sqrt(d/h)`; padded keys get [`MASK_NEG`] before the
/// softmax. There is no residual connection.
pub fn multi_head_attention(
    g: &mut Graph,
    layer: &EncoderLayerParams,
    z: Var,
    mask: &Tensor,
    heads: usize,
) -> Result<Var> {
    let (rows, d) = g.shape(z);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let batch = mask.rows();
    let n = mask.cols();
    if batch * n != rows {
        return Err(Error::Shape(format!(
            "mask {batch}x{n} does not cover {rows} token rows"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = g.param(layer.query);
    let wk = g.param(layer.key);
    let wv = g.param(layer.value);
    let q = g.matmul(z, wq);
    let k = g.matmul(z, wk);
    let v = g.matmul(z, wv);

    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let bias: Vec<f64> = mask
            .row(b)
            .iter()
            .map(|&m| if m > 0.0 { 0.0 } else { MASK_NEG })
            .collect();
        let padded = bias.iter().any(|&x| x != 0.0);
        let key_bias = padded.then(|| g.constant(Tensor::new(vec![n], bias).expect("n values")));
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, b * n, n),
                g.slice_rows(k, b * n, n),
                g.slice_rows(v, b * n, n),
            )
        };
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qb, kb, vb)
            } else {
                (
                    g.slice_cols(qb, h * dh, dh),
                    g.slice_cols(kb, h * dh, dh),
                    g.slice_cols(vb, h * dh, dh),
                )
            };
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(kbias) = key_bias {
                scores = g.add_row(scores, kbias);
            }
            let attn = g.softmax_rows(scores);
            per_head.push(g.matmul(attn, vh));
        }
        samples.push(if heads == 1 {
            per_head[0]
        } else {
            g.concat_cols(&per_head)
        });
    }
    let concat = if batch == 1 {
        samples[0]
    } else {
        g.concat_rows(&samples)
    };
    let wo = g.param(layer.output);
    Ok(g.matmul(concat, wo))
}

/// Token-wise gate: `ReLU(Linear_outer([sigmoid(Z w_G) * Z, Linear_inner(Z)]))`.
pub fn gated_layer(g: &mut Graph, layer: &EncoderLayerParams, z_att: Var) -> Var {
    let (_, gate) = gate_values(g, layer, z_att);
    let gated = g.mul_col(z_att, gate);
    let wi = g.param(layer.inner_weight);
    let bi = g.param(layer.inner_bias);
    let inner = g.linear(z_att, wi, Some(bi));
    let both = g.concat_cols(&[gated, inner]);
    let wo = g.param(layer.outer_weight);
    let bo = g.param(layer.outer_bias);
    let out = g.linear(both, wo, Some(bo));
    g.relu(out)
}

/// Gate logits and their sigmoid, one per token row.
pub fn gate_values(g: &mut Graph, layer: &EncoderLayerParams, z_att: Var) -> (Var, Var) {
    let wg = g.param(layer.gate);
    let logits = g.matmul(z_att, wg);
    (logits, g.sigmoid(logits))
}

/// Runs every layer and returns the `[B x d]` final `[cls]` embeddings.
pub fn encode(g: &mut Graph, model: &Model, batch: &EmbeddedBatch) -> Result<Var> {
    let z = encode_tokens(g, model, batch)?;
    Ok(g.select_rows(z, &batch.cls_rows()))
}

/// All final-layer token embeddings, `[(B * n) x d]`.
pub fn encode_tokens(g: &mut Graph, model: &Model, batch: &EmbeddedBatch) -> Result<Var> {
    let mut z = batch.tokens;
    for layer in &model.layers {
        let att = multi_head_attention(g, layer, z, &batch.mask, model.config.heads)?;
        z = gated_layer(g, layer, att);
    }
    Ok(z)
}

/// Logits `z W + b`; one column for binary tasks.
pub fn classify(g: &mut Graph, model: &Model, z_cls: Var) -> Var {
    let w = g.param(model.heads.classifier_weight);
    let b = g.param(model.heads.classifier_bias);
    g.linear(z_cls, w, Some(b))
}

/// Bias-free projection used by the contrastive objectives.
pub fn project(g: &mut Graph, model: &Model, z_cls: Var) -> Var {
    let w = g.param(model.heads.projector);
    g.matmul(z_cls, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{sigmoid, ParamStore};
    use crate::model::{ModelConfig, NumericNorm};
    use crate::tensor::Initializer;
    use crate::tensor::InitScheme;

    fn model(d: usize, h: usize, layers: usize) -> Model {
        Model::new(ModelConfig {
            dim: d,
            heads: h,
            layers,
            classes: 2,
            seed: 5,
            numeric_norm: NumericNorm::NormThenScale,
        })
        .unwrap()
    }

    fn random(shape: &[usize], stream: &str) -> Tensor {
        Initializer::new(99).init(stream, shape, InitScheme::UniformFan { fan_in: 1 })
    }

    /// Straight-line evaluation with explicit per-head slices and loops.
    #[allow(clippy::needless_range_loop)]
    fn attention_oracle(store: &ParamStore, layer: &EncoderLayerParams, z: &Tensor, h: usize) -> Tensor {
        let (n, d) = (z.rows(), z.cols());
        let dh = d / h;
        let wq = store.value(layer.query);
        let wk = store.value(layer.key);
        let wv = store.value(layer.value);
        let wo = store.value(layer.output);
        let proj = |w: &Tensor, i: usize, c: usize| -> f64 {
            (0..d).map(|p| z.get(i, p) * w.get(p, c)).sum()
        };
        let mut concat = vec![vec![0.0; d]; n];
        for head in 0..h {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| proj(wq, i, head * dh + c) * proj(wk, j, head * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..dh {
                    concat[i][head * dh + c] = (0..n)
                        .map(|j| exps[j] / total * proj(wv, j, head * dh + c))
                        .sum();
                }
            }
        }
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            for c in 0..d {
                out[i][c] = (0..d).map(|p| concat[i][p] * wo.get(p, c)).sum();
            }
        }
        Tensor::from_rows(&out)
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let m = model(4, 2, 1);
        let z = random(&[3, 4], "z");
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let mask = Tensor::full(&[1, 3], 1.0);
        let out = multi_head_attention(&mut g, &m.layers[0], zv, &mask, 2).unwrap();
        let oracle = attention_oracle(&m.store, &m.layers[0], &z, 2);
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let m = model(4, 2, 1);
        let z = random(&[1, 4], "z1");
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let out = multi_head_attention(&mut g, &m.layers[0], zv, &Tensor::full(&[1, 1], 1.0), 2).unwrap();
        let l = &m.layers[0];
        let expect = z
            .matmul(m.store.value(l.value))
            .unwrap()
            .matmul(m.store.value(l.output))
            .unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let m = model(4, 2, 1);
        let z = random(&[3, 4], "zp");
        let perm = [2, 0, 1];
        let zp = Tensor::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let mask = Tensor::full(&[1, 3], 1.0);
        let mut g = Graph::new(&m.store);
        let a = g.constant(z);
        let b = g.constant(zp);
        let oa = multi_head_attention(&mut g, &m.layers[0], a, &mask, 2).unwrap();
        let ob = multi_head_attention(&mut g, &m.layers[0], b, &mask, 2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let diff: f64 = g
                .value(oa)
                .row(i)
                .iter()
                .zip(g.value(ob).row(k))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-14);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let m = model(4, 2, 1);
        let mut g = Graph::new(&m.store);
        let z = g.constant(random(&[2, 4], "z"));
        assert!(multi_head_attention(&mut g, &m.layers[0], z, &Tensor::full(&[1, 2], 1.0), 3).is_err());
    }

    /// Straight-line evaluation of the gated layer.
    fn gate_oracle(store: &ParamStore, l: &EncoderLayerParams, z: &Tensor) -> Tensor {
        let (n, d) = (z.rows(), z.cols());
        let wg = store.value(l.gate);
        let wi = store.value(l.inner_weight);
        let bi = store.value(l.inner_bias);
        let wo = store.value(l.outer_weight);
        let bo = store.value(l.outer_bias);
        let mut rows = Vec::new();
        for i in 0..n {
            let gate = sigmoid((0..d).map(|p| z.get(i, p) * wg.get(p, 0)).sum());
            let mut cat: Vec<f64> = z.row(i).iter().map(|v| v * gate).collect();
            for c in 0..d {
                cat.push(bi.data()[c] + (0..d).map(|p| z.get(i, p) * wi.get(p, c)).sum::<f64>());
            }
            rows.push(
                (0..d)
                    .map(|c| {
                        let s = bo.data()[c] + (0..2 * d).map(|p| cat[p] * wo.get(p, c)).sum::<f64>();
                        s.max(0.0)
                    })
                    .collect(),
            );
        }
        Tensor::from_rows(&rows)
    }

    #[test]
    fn gated_layer_matches_oracle() {
        let m = model(4, 2, 1);
        let z = random(&[3, 4], "zg");
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let out = gated_layer(&mut g, &m.layers[0], zv);
        let oracle = gate_oracle(&m.store, &m.layers[0], &z);
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn gate_saturation_and_half() {
        let mut m = model(4, 2, 1);
        let l = m.layers[0];
        let z = random(&[3, 4], "zs");

        m.store.replace(l.gate, Tensor::zeros(&[4, 1]));
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let (_, gates) = gate_values(&mut g, &l, zv);
        assert!(g.value(gates).data().iter().all(|&v| v == 0.5));

        // A large negative gate with inputs of one sign drives every gate to 0.
        let pos = z.map(f64::abs).map(|v| v + 0.1);
        m.store.replace(l.gate, Tensor::full(&[4, 1], -1e4));
        let mut g = Graph::new(&m.store);
        let zv = g.constant(pos.clone());
        let out = gated_layer(&mut g, &l, zv);
        let mut g2 = Graph::new(&m.store);
        let zero = g2.constant(Tensor::zeros(&[3, 4]));
        let zv2 = g2.constant(pos);
        let wi = g2.param(l.inner_weight);
        let bi = g2.param(l.inner_bias);
        let inner = g2.linear(zv2, wi, Some(bi));
        let cat = g2.concat_cols(&[zero, inner]);
        let wo = g2.param(l.outer_weight);
        let bo = g2.param(l.outer_bias);
        let lin = g2.linear(cat, wo, Some(bo));
        let expect = g2.relu(lin);
        assert_eq!(g.value(out), g2.value(expect));
    }

    #[test]
    fn classify_and_project_examples() {
        let mut m = model(4, 2, 1);
        let z = random(&[1, 4], "zc");
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let zero = g.constant(Tensor::zeros(&[1, 4]));
        let z2 = g.scale(zv, 2.0);
        let (c0, c1, c2) = (classify(&mut g, &m, zero), classify(&mut g, &m, zv), classify(&mut g, &m, z2));
        let (a0, a1, a2) = (g.value(c0).item(), g.value(c1).item(), g.value(c2).item());
        assert!(((a2 - a0) - 2.0 * (a1 - a0)).abs() < 1e-14);

        let p = project(&mut g, &m, zv);
        let expect = z.matmul(m.store.value(m.heads.projector)).unwrap();
        assert!(g.value(p).max_abs_diff(&expect) < 1e-15);
        drop(g);

        m.store.replace(m.heads.classifier_weight, Tensor::zeros(&[4, 1]));
        m.store.replace(m.heads.projector, Tensor::identity(4));
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let logit = classify(&mut g, &m, zv);
        assert_eq!(g.value(logit).item(), 0.0);
        assert_eq!(sigmoid(g.value(logit).item()), 0.5);
        let p = project(&mut g, &m, zv);
        assert_eq!(g.value(p), &z);
    }

    #[test]
    fn multiclass_argmax_matches_affine_oracle() {
        let mut m = model(4, 2, 1);
        m.reset_classifier(3).unwrap();
        let z = random(&[2, 4], "zm");
        let mut g = Graph::new(&m.store);
        let zv = g.constant(z.clone());
        let logits = classify(&mut g, &m, zv);
        let w = m.store.value(m.heads.classifier_weight);
        let b = m.store.value(m.heads.classifier_bias);
        for i in 0..2 {
            let oracle: Vec<f64> = (0..3)
                .map(|c| b.data()[c] + (0..4).map(|p| z.get(i, p) * w.get(p, c)).sum::<f64>())
                .collect();
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(g.value(logits).row(i)), argmax(&oracle));
        }
    }
}
