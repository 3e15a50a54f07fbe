//! Finite-difference checks of network layers and the full model.

use super::{random_tensor, relative_error, rng, weighted_sum};
use gfcn::ctc::{ctc_loss_batch, FrameLogProbs, LabelSeq};
use gfcn::model::{GateVariant, Model, ModelConfig};
use gfcn::params::ParamKind;
use gfcn::Tensor;
use rand::Rng;

pub const H: f64 = 1e-6;

pub fn tiny_config(variant: GateVariant) -> ModelConfig {
    let mut c = ModelConfig::from_notation("2(8)", 3).unwrap();
    c.input_height = 16;
    c.gate_variant = variant;
    c
}

/// Compares graph gradients of every trainable tensor with central
/// differences on up to `coords` entries per tensor.
pub fn model_gradient_check(
    model: &mut Model<f64>,
    loss: impl Fn(&Model<f64>, bool) -> (f64, Option<Vec<(String, Tensor<f64>)>>),
    coords: usize,
) -> Vec<(String, f64)> {
    let (_, grads) = loss(model, true);
    let grads = grads.unwrap();
    let mut r = rng(99);
    let mut out = Vec::new();
    for (name, analytic) in grads {
        let id = model.store.find(&name).unwrap();
        let n = analytic.len();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| r.random_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for j in picks {
            let x = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = x + H;
            let up = loss(model, false).0;
            model.store.get_mut(id).data_mut()[j] = x - H;
            let down = loss(model, false).0;
            model.store.get_mut(id).data_mut()[j] = x;
            a.push(analytic.data()[j]);
            num.push((up - down) / (2.0 * H));
        }
        // A bias feeding batch norm has an exactly zero gradient; the
        // difference quotient there is pure rounding noise.
        let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = if scale < 1e-7 && a.iter().all(|v| v.abs() < 1e-12) {
            scale
        } else {
            relative_error(&a, &num)
        };
        out.push((name, err));
    }
    out
}

pub fn perturb_all(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store.trainable_ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
}

pub fn trainable_grads(model: &Model<f64>, f: &gfcn::layers::Forward<'_, f64>, g: &gfcn::graph::Gradients<f64>) -> Vec<(String, Tensor<f64>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, p)| {
            let v = f.bindings.var(id);
            (p.name.clone(), g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        })
        .collect()
}

/// Full tiny model (2 blocks of width 8, 3 symbols, 16×24 input) under CTC.
pub fn full_model_errors() -> Vec<(String, f64)> {
    let mut model = Model::<f64>::build(tiny_config(GateVariant::Baseline), 3).unwrap();
    perturb_all(&mut model, 4);
    let mut r = rng(5);
    let images = random_tensor(&mut r, &[2, 16, 24, 1], 0.0, 1.0);
    let targets = vec![LabelSeq(vec![0, 1, 1, 2]), LabelSeq(vec![2, 0])];
    let widths = [24usize, 20];
    let loss = |m: &Model<f64>, grads: bool| {
        let mut f = m.begin(true, grads, 7);
        let x = f.graph.input(images.clone());
        let out = m.forward(&mut f, x).unwrap();
        let val = f.graph.value(out).clone();
        let seqs = FrameLogProbs::batch_from_output(&val, Some(&widths)).unwrap();
        let (l, per) = ctc_loss_batch(&seqs, &targets).unwrap();
        if !grads {
            return (l, None);
        }
        let [n, _, w, c] = val.dims4("test").unwrap();
        let mut gd = vec![0.0; n * w * c];
        for (i, g) in per.iter().enumerate() {
            gd[i * w * c..i * w * c + g.len()].copy_from_slice(g);
        }
        let lv = f.graph.external_loss(out, l, Tensor::from_vec(&[n, 1, w, c], gd).unwrap()).unwrap();
        let g = f.graph.backward(lv).unwrap();
        (l, Some(trainable_grads(m, &f, &g)))
    };
    model_gradient_check(&mut model, loss, 12)
}

/// One GateBlock of every variant.
pub fn gate_block_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for variant in GateVariant::ALL {
        let mut model = Model::<f64>::build(tiny_config(variant), 11).unwrap();
        perturb_all(&mut model, 12);
        let mut r = rng(13);
        let y = random_tensor(&mut r, &[2, 3, 5, 8], -1.0, 1.0);
        let w = random_tensor(&mut r, &[2, 3, 5, 8], -1.0, 1.0);
        let loss = |m: &Model<f64>, grads: bool| {
            let mut f = m.begin(true, grads, 0);
            let x = f.graph.input(y.clone());
            let out = m.gate_block_forward(&mut f, 0, x).unwrap();
            let l = weighted_sum(&mut f.graph, out, &w);
            let val = f.graph.value(l).item();
            if !grads {
                return (val, None);
            }
            let g = f.graph.backward(l).unwrap();
            let all = trainable_grads(m, &f, &g);
            (val, Some(all.into_iter().filter(|(n, _)| n.starts_with("block0/p") || n.starts_with("block0/h") || n.starts_with("block0/t")).collect()))
        };
        for (name, err) in model_gradient_check(&mut model, loss, 12) {
            out.push((format!("{}: {name}", variant.name()), err));
        }
    }
    out
}

/// The stem and the head.
pub fn stem_and_head_errors() -> Vec<(String, f64)> {
    let mut model = Model::<f64>::build(tiny_config(GateVariant::Baseline), 21).unwrap();
    perturb_all(&mut model, 22);
    let mut r = rng(23);
    let img = random_tensor(&mut r, &[2, 16, 9, 1], 0.0, 1.0);
    let ws = random_tensor(&mut r, &[2, 16, 9, 17], -1.0, 1.0);
    let stem_loss = |m: &Model<f64>, grads: bool| {
        let mut f = m.begin(true, grads, 0);
        let x = f.graph.input(img.clone());
        let out = m.stem_forward(&mut f, x).unwrap();
        let l = weighted_sum(&mut f.graph, out, &ws);
        let val = f.graph.value(l).item();
        if !grads {
            return (val, None);
        }
        let g = f.graph.backward(l).unwrap();
        let all = trainable_grads(m, &f, &g);
        (val, Some(all.into_iter().filter(|(n, _)| n.starts_with("stem/")).collect()))
    };
    let mut out = model_gradient_check(&mut model, stem_loss, 16);

    let feats = random_tensor(&mut r, &[2, 4, 7, 8], -1.0, 1.0);
    let wh = random_tensor(&mut r, &[2, 1, 7, 4], -1.0, 1.0);
    let head_loss = |m: &Model<f64>, grads: bool| {
        let mut f = m.begin(true, grads, 5);
        let x = f.graph.input(feats.clone());
        let out = m.head_forward(&mut f, x).unwrap();
        let l = weighted_sum(&mut f.graph, out, &wh);
        let val = f.graph.value(l).item();
        if !grads {
            return (val, None);
        }
        let g = f.graph.backward(l).unwrap();
        let all = trainable_grads(m, &f, &g);
        (val, Some(all.into_iter().filter(|(n, _)| n.starts_with("head/")).collect()))
    };
    out.extend(model_gradient_check(&mut model, head_loss, 16));
    out
}
