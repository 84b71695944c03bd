//! The encoder classifier and the U-Net, with hand-written backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::ops::{self, Tensor};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classifier,
    Unet,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Classifier => "classifier",
            Stage::Unet => "unet",
        })
    }
}

/// One named parameter tensor. Conv weights are `[3, 3, cin, cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

/// Per-pixel void probabilities for one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Output shape of one executed layer, recorded during a forward pass.
pub type ShapeTrace = Vec<(String, (usize, usize, usize))>;

#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    stage: Stage,
    params: Vec<Param>,
    encoder: Vec<Conv>,
    decoder: Vec<(Conv, Conv)>,
    head: Option<Conv>,
    /// (weight, bias, flattened feature length)
    fc: Option<(usize, usize, usize)>,
}

struct EncCache {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    pool_args: Vec<Vec<u8>>,
}

struct DecCache {
    ups: Vec<Tensor>,
    mids: Vec<Tensor>,
    cats: Vec<Tensor>,
    outs: Vec<Tensor>,
}

const MICRO_BATCH: usize = 16;

impl Network {
    /// Randomly initialized encoder + dense classifier head.
    pub fn classifier(arch: &Architecture, seed: u64) -> Result<Self> {
        Self::init(arch, Stage::Classifier, seed)
    }

    /// Randomly initialized U-Net. With `encoder`, Conv1..ConvE are copied
    /// from it (a classifier or another U-Net); the decoder stays random.
    pub fn unet(arch: &Architecture, seed: u64, encoder: Option<&Network>) -> Result<Self> {
        let mut net = Self::init(arch, Stage::Unet, seed)?;
        if let Some(src) = encoder {
            if src.arch.encoder != arch.encoder || src.arch.input_size != arch.input_size {
                return Err(Error::DimensionMismatch(format!(
                    "encoder widths {:?} @ {} do not match {:?} @ {}",
                    src.arch.encoder, src.arch.input_size, arch.encoder, arch.input_size
                )));
            }
            for i in 0..net.encoder.len() {
                let (d, s) = (net.encoder[i], src.encoder[i]);
                net.params[d.w].value.clone_from(&src.params[s.w].value);
                net.params[d.b].value.clone_from(&src.params[s.b].value);
            }
        }
        Ok(net)
    }

    fn init(arch: &Architecture, stage: Stage, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(arch, stage)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_conv = net.head.map(|h| h.w);
        for i in 0..net.params.len() {
            let p = &net.params[i];
            let std = if p.name.ends_with(".bias") {
                0.0
            } else if p.name == "fc.weight" {
                0.01
            } else {
                let fan_in = (p.shape[0] * p.shape[1] * p.shape[2]) as f32;
                if Some(i) == last_conv {
                    (1.0 / fan_in).sqrt()
                } else {
                    (2.0 / fan_in).sqrt()
                }
            };
            let value = if std == 0.0 {
                vec![0.0; p.value.len()]
            } else {
                let d = Normal::new(0.0f32, std).expect("finite std");
                (0..p.value.len()).map(|_| d.sample(&mut rng)).collect()
            };
            net.params[i].value = value;
        }
        Ok(net)
    }

    /// Layer bookkeeping with zero-filled parameters.
    fn skeleton(arch: &Architecture, stage: Stage) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let conv = |idx: usize, cin: usize, cout: usize, params: &mut Vec<Param>| {
            let w = params.len();
            params.push(Param {
                name: format!("conv{idx}.weight"),
                shape: vec![3, 3, cin, cout],
                value: vec![0.0; 9 * cin * cout],
            });
            params.push(Param {
                name: format!("conv{idx}.bias"),
                shape: vec![cout],
                value: vec![0.0; cout],
            });
            Conv { w, b: w + 1, cin, cout }
        };
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &c) in arch.encoder.iter().enumerate() {
            encoder.push(conv(i + 1, cin, c, &mut params));
            cin = c;
        }
        let e = arch.encoder.len();
        let (mut decoder, mut head, mut fc) = (Vec::new(), None, None);
        match stage {
            Stage::Classifier => {
                let s = arch.input_size >> arch.pools();
                let feat = s * s * cin;
                let w = params.len();
                params.push(Param {
                    name: "fc.weight".into(),
                    shape: vec![feat, 1],
                    value: vec![0.0; feat],
                });
                params.push(Param {
                    name: "fc.bias".into(),
                    shape: vec![1],
                    value: vec![0.0],
                });
                fc = Some((w, w + 1, feat));
            }
            Stage::Unet => {
                let mut idx = e;
                for (j, &(up_c, cat_c)) in arch.decoder.iter().enumerate() {
                    let skip_c = arch.encoder[e - 2 - j];
                    let a = conv(idx + 1, cin, up_c, &mut params);
                    let b = conv(idx + 2, up_c + skip_c, cat_c, &mut params);
                    decoder.push((a, b));
                    idx += 2;
                    cin = cat_c;
                }
                head = Some(conv(idx + 1, cin, 1, &mut params));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            stage,
            params,
            encoder,
            decoder,
            head,
            fc,
        })
    }

    /// Rebuilds a network from named tensors, checking names and shapes.
    pub fn from_tensors(arch: &Architecture, stage: Stage, tensors: Vec<Param>) -> Result<Self> {
        let mut net = Self::skeleton(arch, stage)?;
        if tensors.len() != net.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} tensors supplied, {stage} network has {}",
                tensors.len(),
                net.params.len()
            )));
        }
        for t in tensors {
            let slot = net
                .params
                .iter_mut()
                .find(|p| p.name == t.name)
                .ok_or_else(|| Error::DimensionMismatch(format!("unexpected tensor {}", t.name)))?;
            if slot.shape != t.shape || t.value.len() != slot.value.len() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, t.shape, slot.shape
                )));
            }
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {} holds NaN/Inf", t.name)));
            }
            slot.value = t.value;
        }
        Ok(net)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Output elements per sample: 1 for the classifier, h*w for the U-Net.
    pub fn outputs_per_sample(&self) -> usize {
        match self.stage {
            Stage::Classifier => 1,
            Stage::Unet => self.arch.input_size * self.arch.input_size,
        }
    }

    fn conv_forward(&self, c: Conv, x: &Tensor, relu: bool) -> Tensor {
        let mut y = ops::conv3x3_forward(x, &self.params[c.w].value, &self.params[c.b].value, c.cout);
        if relu {
            ops::relu_inplace(&mut y);
        }
        y
    }

    fn encoder_forward(&self, x: Tensor, trace: &mut Option<&mut ShapeTrace>) -> EncCache {
        let mut cache = EncCache {
            inputs: Vec::new(),
            outputs: Vec::new(),
            pool_args: Vec::new(),
        };
        let mut cur = x;
        for (i, &c) in self.encoder.iter().enumerate() {
            let y = self.conv_forward(c, &cur, true);
            record(trace, format!("Conv{}", i + 1), &y);
            cache.inputs.push(cur);
            if i + 1 < self.encoder.len() {
                let (p, arg) = ops::maxpool2_forward(&y);
                record(trace, format!("Pool{}", i + 1), &p);
                cache.pool_args.push(arg);
                cur = p;
            } else {
                cur = Tensor::zeros(0, 0, 0, 0);
            }
            cache.outputs.push(y);
        }
        cache
    }

    fn decoder_forward(&self, enc: &EncCache, trace: &mut Option<&mut ShapeTrace>) -> (DecCache, Tensor) {
        let e = self.encoder.len();
        let mut cache = DecCache {
            ups: Vec::new(),
            mids: Vec::new(),
            cats: Vec::new(),
            outs: Vec::new(),
        };
        let mut idx = e;
        for (j, &(a, b)) in self.decoder.iter().enumerate() {
            let prev = cache.outs.last().unwrap_or(&enc.outputs[e - 1]);
            let u = ops::upsample2_forward(prev);
            record(trace, format!("Upsample{}", j + 1), &u);
            let m = self.conv_forward(a, &u, true);
            record(trace, format!("Conv{}", idx + 1), &m);
            let skip = e - 1 - j;
            let cat = ops::concat_channels(&m, &enc.outputs[skip - 1]);
            record(trace, format!("Concat(Upsample{}, conv{skip})", j + 1), &cat);
            let o = self.conv_forward(b, &cat, true);
            record(trace, format!("Conv{}", idx + 2), &o);
            idx += 2;
            cache.ups.push(u);
            cache.mids.push(m);
            cache.cats.push(cat);
            cache.outs.push(o);
        }
        let head = self.head.expect("unet head");
        let last = cache.outs.last().unwrap_or(&enc.outputs[e - 1]);
        let logits = self.conv_forward(head, last, false);
        record(trace, format!("Conv{}", idx + 1), &logits);
        (cache, logits)
    }

    fn dense_forward(&self, feat: &Tensor) -> Vec<f32> {
        let (w, b, len) = self.fc.expect("classifier head");
        let (wv, bv) = (&self.params[w].value, self.params[b].value[0]);
        (0..feat.n)
            .map(|s| {
                let f = &feat.data[s * len..(s + 1) * len];
                bv + f.iter().zip(wv).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    /// Raw logits for a batch, `outputs_per_sample()` per sample.
    pub fn forward_logits(&self, x: &Tensor) -> Vec<f32> {
        self.forward_traced(x, None)
    }

    fn forward_traced(&self, x: &Tensor, mut trace: Option<&mut ShapeTrace>) -> Vec<f32> {
        assert_eq!(
            (x.h, x.w, x.c),
            (self.arch.input_size, self.arch.input_size, 1),
            "input shape"
        );
        let enc = self.encoder_forward(x.clone(), &mut trace);
        match self.stage {
            Stage::Classifier => {
                let out = self.dense_forward(enc.outputs.last().expect("encoder output"));
                if let Some(t) = trace {
                    t.push(("Dense".into(), (1, 1, 1)));
                }
                out
            }
            Stage::Unet => self.decoder_forward(&enc, &mut trace).1.data,
        }
    }

    /// Layer-by-layer output shapes of one forward pass on a blank crop.
    pub fn shape_trace(&self) -> ShapeTrace {
        let s = self.arch.input_size;
        let mut trace = Vec::new();
        self.forward_traced(&Tensor::zeros(1, s, s, 1), Some(&mut trace));
        trace
    }

    /// Summed BCE over the batch; gradients of `scale * loss` are added
    /// into `grads` (one buffer per parameter).
    pub(crate) fn accumulate_gradients(&self, x: &Tensor, targets: &[f32], scale: f32, grads: &mut [Vec<f32>]) -> f64 {
        let mut none = None;
        let enc = self.encoder_forward(x.clone(), &mut none);
        let e = self.encoder.len();
        let mut douts: Vec<Option<Tensor>> = vec![None; e];
        let loss;
        match self.stage {
            Stage::Classifier => {
                let feat = &enc.outputs[e - 1];
                let logits = self.dense_forward(feat);
                let (l, dl) = ops::bce_with_logits(&logits, targets, scale);
                loss = l;
                let (w, b, len) = self.fc.expect("classifier head");
                let mut dfeat = Tensor::zeros(feat.n, feat.h, feat.w, feat.c);
                {
                    let wv = &self.params[w].value;
                    let (lo, hi) = grads.split_at_mut(b);
                    let gw = &mut lo[w];
                    for s in 0..feat.n {
                        let f = &feat.data[s * len..(s + 1) * len];
                        for (g, &v) in gw.iter_mut().zip(f) {
                            *g += dl[s] * v;
                        }
                        hi[0][0] += dl[s];
                        for (d, &wv) in dfeat.data[s * len..(s + 1) * len].iter_mut().zip(wv) {
                            *d = dl[s] * wv;
                        }
                    }
                }
                douts[e - 1] = Some(dfeat);
            }
            Stage::Unet => {
                let (dec, logits) = self.decoder_forward(&enc, &mut none);
                let (l, dl) = ops::bce_with_logits(&logits.data, targets, scale);
                loss = l;
                let dlogits = Tensor::from_vec(logits.n, logits.h, logits.w, 1, dl);
                let head = self.head.expect("unet head");
                let head_in = dec.outs.last().unwrap_or(&enc.outputs[e - 1]);
                let mut d = self.conv_backward(head, head_in, &dlogits, grads, true).expect("dx");
                for j in (0..self.decoder.len()).rev() {
                    let (a, b) = self.decoder[j];
                    ops::relu_backward_inplace(&mut d, &dec.outs[j]);
                    let dcat = self.conv_backward(b, &dec.cats[j], &d, grads, true).expect("dx");
                    let (mut dm, dskip) = ops::split_channels(&dcat, a.cout);
                    add_into(&mut douts[e - 2 - j], dskip);
                    ops::relu_backward_inplace(&mut dm, &dec.mids[j]);
                    let du = self.conv_backward(a, &dec.ups[j], &dm, grads, true).expect("dx");
                    d = ops::upsample2_backward(&du);
                }
                add_into(&mut douts[e - 1], d);
            }
        }
        self.encoder_backward(&enc, douts, grads);
        loss
    }

    fn encoder_backward(&self, enc: &EncCache, mut douts: Vec<Option<Tensor>>, grads: &mut [Vec<f32>]) {
        for i in (0..self.encoder.len()).rev() {
            let Some(mut d) = douts[i].take() else { continue };
            ops::relu_backward_inplace(&mut d, &enc.outputs[i]);
            let dx = self.conv_backward(self.encoder[i], &enc.inputs[i], &d, grads, i > 0);
            if let Some(dx) = dx {
                let prev = &enc.outputs[i - 1];
                let dp = ops::maxpool2_backward(&dx, &enc.pool_args[i - 1], prev.h, prev.w);
                add_into(&mut douts[i - 1], dp);
            }
        }
    }

    fn conv_backward(&self, c: Conv, x: &Tensor, dy: &Tensor, grads: &mut [Vec<f32>], need_dx: bool) -> Option<Tensor> {
        debug_assert_eq!(x.c, c.cin);
        let (lo, hi) = grads.split_at_mut(c.b);
        ops::conv3x3_backward(x, &self.params[c.w].value, dy, &mut lo[c.w], &mut hi[0], need_dx)
    }

    fn check_inputs(&self, images: &[GrayImage]) -> Result<()> {
        let s = self.arch.input_size;
        for (i, img) in images.iter().enumerate() {
            if img.width() != s || img.height() != s {
                return Err(Error::DimensionMismatch(format!(
                    "input {i} is {}x{}, network expects {s}x{s}",
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(())
    }

    fn predict_raw(&self, images: &[GrayImage]) -> Result<Vec<f32>> {
        self.check_inputs(images)?;
        let _ftz = ops::FlushDenormals::new();
        let mut out = Vec::with_capacity(images.len() * self.outputs_per_sample());
        for chunk in images.chunks(MICRO_BATCH) {
            let x = images_to_tensor(chunk);
            out.extend(self.forward_logits(&x).into_iter().map(ops::sigmoid));
        }
        Ok(out)
    }

    /// Void probability per crop (classifier stage).
    pub fn predict_scores(&self, images: &[GrayImage]) -> Result<Vec<f32>> {
        if self.stage != Stage::Classifier {
            return Err(Error::InvalidArgument("predict_scores needs a classifier".into()));
        }
        self.predict_raw(images)
    }

    /// Per-pixel void probability maps (U-Net stage).
    pub fn predict_maps(&self, images: &[GrayImage]) -> Result<Vec<ProbMap>> {
        if self.stage != Stage::Unet {
            return Err(Error::InvalidArgument("predict_maps needs a U-Net".into()));
        }
        let s = self.arch.input_size;
        let flat = self.predict_raw(images)?;
        Ok(flat
            .chunks_exact(s * s)
            .map(|d| ProbMap {
                width: s,
                height: s,
                data: d.to_vec(),
            })
            .collect())
    }
}

fn record(trace: &mut Option<&mut ShapeTrace>, name: String, t: &Tensor) {
    if let Some(tr) = trace.as_mut() {
        tr.push((name, t.sample_shape()));
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => {
            for (a, b) in s.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

/// Stacks crops into an `n x h x w x 1` tensor scaled to [0, 1].
pub fn images_to_tensor(images: &[GrayImage]) -> Tensor {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let data = images
        .iter()
        .flat_map(|img| img.pixels().iter().map(|&p| p as f32 / 255.0))
        .collect();
    Tensor::from_vec(images.len(), h, w, 1, data)
}

/// Single-crop convenience wrapper around [`Network::predict_maps`].
pub fn predict_mask(net: &Network, crop: &GrayImage) -> Result<ProbMap> {
    Ok(net.predict_maps(std::slice::from_ref(crop))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::arch::{classifier_layers, unet_layers};

    fn noise_image(s: usize, seed: u32) -> GrayImage {
        GrayImage::from_fn(s, s, |x, y| {
            ((x as u32 * 73 + y as u32 * 151 + seed * 97).wrapping_mul(2654435761) >> 24) as u8
        })
    }

    #[test]
    fn full_size_parameter_counts_are_fixed() {
        let a = Architecture::default();
        let c = Network::classifier(&a, 1).unwrap();
        let u = Network::unet(&a, 1, None).unwrap();
        let convs = |widths: &[(usize, usize)]| -> usize { widths.iter().map(|&(i, o)| 9 * i * o + o).sum() };
        let enc = convs(&[(1, 32), (32, 64), (64, 64), (64, 64), (64, 128), (128, 256), (256, 512)]);
        assert_eq!(c.parameter_count(), enc + 512 + 1);
        let dec = convs(&[
            (512, 256),
            (512, 256),
            (256, 128),
            (256, 128),
            (128, 64),
            (128, 64),
            (64, 64),
            (128, 64),
            (64, 64),
            (128, 64),
            (64, 32),
            (64, 32),
            (32, 1),
        ]);
        assert_eq!(u.parameter_count(), enc + dec);
        assert_eq!(
            Network::unet(&a, 99, None).unwrap().parameter_count(),
            u.parameter_count()
        );
    }

    #[test]
    fn traced_shapes_match_declared_layers() {
        let a = Architecture::default();
        let u = Network::unet(&a, 0, None).unwrap();
        let declared: ShapeTrace = unet_layers(&a).into_iter().map(|l| (l.name, l.output)).collect();
        assert_eq!(u.shape_trace(), declared);
        let c = Network::classifier(&a, 0).unwrap();
        let declared: ShapeTrace = classifier_layers(&a).into_iter().map(|l| (l.name, l.output)).collect();
        assert_eq!(c.shape_trace(), declared);
    }

    #[test]
    fn classifier_output_is_probability_and_pure() {
        let net = Network::classifier(&Architecture::miniature(16), 3).unwrap();
        let imgs = [noise_image(16, 1), GrayImage::new(16, 16, 0)];
        let a = net.predict_scores(&imgs).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a, net.predict_scores(&imgs).unwrap());
    }

    #[test]
    fn batched_prediction_matches_single() {
        let net = Network::unet(&Architecture::miniature(16), 5, None).unwrap();
        let imgs: Vec<_> = (0..20).map(|i| noise_image(16, i)).collect();
        let batch = net.predict_maps(&imgs).unwrap();
        for (img, b) in imgs.iter().zip(&batch) {
            let single = predict_mask(&net, img).unwrap();
            for (p, q) in single.data.iter().zip(&b.data) {
                assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn blank_input_gives_finite_probabilities() {
        let net = Network::unet(&Architecture::default(), 2, None).unwrap();
        let m = predict_mask(&net, &GrayImage::new(64, 64, 0)).unwrap();
        assert_eq!((m.width, m.height), (64, 64));
        assert!(m.data.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = Network::unet(&Architecture::miniature(16), 5, None).unwrap();
        assert!(matches!(
            net.predict_maps(&[GrayImage::new(15, 16, 0)]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn unet_copies_encoder_weights_only() {
        let a = Architecture::miniature(16);
        let c = Network::classifier(&a, 11).unwrap();
        let u = Network::unet(&a, 12, Some(&c)).unwrap();
        let fresh = Network::unet(&a, 12, None).unwrap();
        for p in u.params() {
            let idx: usize = p.name[4..p.name.find('.').unwrap()].parse().unwrap();
            if idx <= a.encoder.len() {
                let src = c.params().iter().find(|q| q.name == p.name).unwrap();
                assert_eq!(p.value, src.value);
            } else {
                let f = fresh.params().iter().find(|q| q.name == p.name).unwrap();
                assert_eq!(p.value, f.value);
            }
        }
        let other = Architecture {
            encoder: vec![2, 3, 5],
            ..a.clone()
        };
        assert!(Network::unet(&other, 1, Some(&c)).is_err());
    }

    #[test]
    fn tensors_round_trip_and_are_validated() {
        let a = Architecture::miniature(8);
        let u = Network::unet(&a, 4, None).unwrap();
        let back = Network::from_tensors(&a, Stage::Unet, u.params().to_vec()).unwrap();
        assert_eq!(back.params(), u.params());
        let mut bad = u.params().to_vec();
        bad[0].shape = vec![3, 3, 1, 3];
        assert!(Network::from_tensors(&a, Stage::Unet, bad).is_err());
        let mut nan = u.params().to_vec();
        nan[1].value[0] = f32::NAN;
        assert!(matches!(
            Network::from_tensors(&a, Stage::Unet, nan),
            Err(Error::NonFinite(_))
        ));
    }
}
