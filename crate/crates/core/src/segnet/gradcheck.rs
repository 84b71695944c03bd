//! Analytic gradients against central differences of an independent f64
//! forward pass, on miniature networks.

use std::collections::HashMap;

use super::arch::Architecture;
use super::model::{Network, Stage};
use super::ops::Tensor;

/// (h, w, c, data) for one sample.
#[derive(Clone)]
struct Map {
    h: usize,
    w: usize,
    c: usize,
    d: Vec<f64>,
}

impl Map {
    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.d[(y * self.w + x) * self.c + c]
    }
}

type Weights = HashMap<String, Vec<f64>>;

fn conv(m: &Map, p: &Weights, idx: usize, cout: usize, relu: bool) -> Map {
    let wt = &p[&format!("conv{idx}.weight")];
    let b = &p[&format!("conv{idx}.bias")];
    let mut d = vec![0.0; m.h * m.w * cout];
    for y in 0..m.h {
        for x in 0..m.w {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        if sy < 0 || sx < 0 || sy >= m.h as i64 || sx >= m.w as i64 {
                            continue;
                        }
                        for ci in 0..m.c {
                            acc += m.at(sy as usize, sx as usize, ci) * wt[((ky * 3 + kx) * m.c + ci) * cout + co];
                        }
                    }
                }
                d[(y * m.w + x) * cout + co] = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    Map {
        h: m.h,
        w: m.w,
        c: cout,
        d,
    }
}

fn pool(m: &Map) -> Map {
    let (h, w) = (m.h / 2, m.w / 2);
    let mut d = Vec::with_capacity(h * w * m.c);
    for y in 0..h {
        for x in 0..w {
            for c in 0..m.c {
                let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| m.at(2 * y + dy, 2 * x + dx, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                d.push(v);
            }
        }
    }
    Map { h, w, c: m.c, d }
}

fn upsample(m: &Map) -> Map {
    let (h, w) = (m.h * 2, m.w * 2);
    let mut d = Vec::with_capacity(h * w * m.c);
    for y in 0..h {
        for x in 0..w {
            for c in 0..m.c {
                d.push(m.at(y / 2, x / 2, c));
            }
        }
    }
    Map { h, w, c: m.c, d }
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut d = Vec::with_capacity(a.d.len() + b.d.len());
    for i in 0..a.h * a.w {
        d.extend_from_slice(&a.d[i * a.c..(i + 1) * a.c]);
        d.extend_from_slice(&b.d[i * b.c..(i + 1) * b.c]);
    }
    Map {
        h: a.h,
        w: a.w,
        c: a.c + b.c,
        d,
    }
}

fn bce(z: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Summed BCE of one sample under the reference model.
fn reference_loss(arch: &Architecture, stage: Stage, p: &Weights, input: Map, target: &[f64]) -> f64 {
    let mut feats = Vec::new();
    let mut cur = input;
    for (i, &c) in arch.encoder.iter().enumerate() {
        let y = conv(&cur, p, i + 1, c, true);
        if i + 1 < arch.encoder.len() {
            cur = pool(&y);
        }
        feats.push(y);
    }
    let e = arch.encoder.len();
    let logits: Vec<f64> = match stage {
        Stage::Classifier => {
            let f = feats.last().unwrap();
            let w = &p["fc.weight"];
            vec![p["fc.bias"][0] + f.d.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()]
        }
        Stage::Unet => {
            let mut d = feats[e - 1].clone();
            let mut idx = e;
            for (j, &(a, b)) in arch.decoder.iter().enumerate() {
                let m = conv(&upsample(&d), p, idx + 1, a, true);
                d = conv(&concat(&m, &feats[e - 2 - j]), p, idx + 2, b, true);
                idx += 2;
            }
            conv(&d, p, idx + 1, 1, false).d
        }
    };
    logits.iter().zip(target).map(|(&z, &y)| bce(z, y)).sum()
}

fn check(stage: Stage, seed: u64) {
    let arch = Architecture::miniature(8);
    let mut net = match stage {
        Stage::Classifier => Network::classifier(&arch, seed).unwrap(),
        Stage::Unet => Network::unet(&arch, seed, None).unwrap(),
    };
    // Zero biases put pre-activations exactly on the ReLU kink when an
    // upstream channel is dead; nudge them off it.
    for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for (i, b) in p.value.iter_mut().enumerate() {
            *b = 0.05 + 0.01 * i as f32;
        }
    }
    let n = 2;
    let s = arch.input_size;
    let xs: Vec<f32> = (0..n * s * s)
        .map(|i| (((i as u64 * 7919 + seed * 104729) % 1000) as f32) / 1000.0)
        .collect();
    let per = net.outputs_per_sample();
    let ts: Vec<f32> = (0..n * per).map(|i| ((i * 31 + 7) % 3 == 0) as u8 as f32).collect();

    let mut grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    net.accumulate_gradients(&Tensor::from_vec(n, s, s, 1, xs.clone()), &ts, 1.0, &mut grads);

    let mut weights: Weights = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.iter().map(|&v| v as f64).collect()))
        .collect();
    let total = |w: &Weights| -> f64 {
        (0..n)
            .map(|k| {
                let input = Map {
                    h: s,
                    w: s,
                    c: 1,
                    d: xs[k * s * s..(k + 1) * s * s].iter().map(|&v| v as f64).collect(),
                };
                let t: Vec<f64> = ts[k * per..(k + 1) * per].iter().map(|&v| v as f64).collect();
                reference_loss(&arch, stage, w, input, &t)
            })
            .sum()
    };

    let h = 1e-6;
    let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
    for (pi, p) in net.params().iter().enumerate() {
        for k in 0..p.value.len() {
            let orig = weights[&p.name][k];
            weights.get_mut(&p.name).unwrap()[k] = orig + h;
            let up = total(&weights);
            weights.get_mut(&p.name).unwrap()[k] = orig - h;
            let down = total(&weights);
            weights.get_mut(&p.name).unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - grads[pi][k] as f64).powi(2);
            ref2 += fd * fd;
        }
    }
    let rel = diff2.sqrt() / ref2.sqrt().max(1e-12);
    assert!(ref2 > 0.0);
    assert!(rel < 1e-4, "{stage} relative gradient error {rel:e}");
}

#[test]
fn unet_gradients_match_central_differences() {
    check(Stage::Unet, 3);
}

#[test]
fn classifier_gradients_match_central_differences() {
    check(Stage::Classifier, 5);
}
