//! Network topology: channel widths, layer naming and the declared shape chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel widths of the encoder/decoder. The default is the full-size
/// network for 64x64 gray crops; smaller instances exist for tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    /// Output channels of Conv1..ConvE; a 2x max pool follows every conv but
    /// the last.
    pub encoder: Vec<usize>,
    /// Per decoder block: (conv after upsample, conv after concat).
    pub decoder: Vec<(usize, usize)>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder: vec![32, 64, 64, 64, 128, 256, 512],
            decoder: vec![(256, 256), (128, 128), (64, 64), (64, 64), (64, 64), (32, 32)],
        }
    }
}

impl Architecture {
    /// Two pooling levels, a handful of channels. Same layer kinds as the
    /// full network.
    pub fn miniature(input_size: usize) -> Self {
        Self {
            input_size,
            encoder: vec![2, 3, 4],
            decoder: vec![(3, 3), (2, 2)],
        }
    }

    pub fn pools(&self) -> usize {
        self.encoder.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one conv".into()));
        }
        if self.decoder.len() != self.pools() {
            return Err(Error::InvalidArgument(format!(
                "decoder has {} blocks, encoder has {} pools",
                self.decoder.len(),
                self.pools()
            )));
        }
        let factor = 1usize << self.pools();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} not divisible by the downsampling factor {factor}",
                self.input_size
            )));
        }
        if self
            .encoder
            .iter()
            .chain(self.decoder.iter().flat_map(|(a, b)| [a, b]))
            .any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        Ok(())
    }

    /// Index (1-based) of the final 1-channel conv.
    pub fn head_conv(&self) -> usize {
        self.encoder.len() + 2 * self.decoder.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Pool,
    Upsample,
    Concat,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Filter size; `None` for concat and dense.
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    /// Output shape (h, w, c).
    pub output: (usize, usize, usize),
    /// Encoder conv feeding a concat.
    pub skip: Option<String>,
}

impl LayerSpec {
    fn conv(i: usize, s: usize, c: usize) -> Self {
        Self {
            name: format!("Conv{i}"),
            kind: LayerKind::Conv,
            kernel: Some(3),
            stride: Some(1),
            output: (s, s, c),
            skip: None,
        }
    }
}

/// Conv1..ConvE interleaved with Pool1..Pool(E-1).
pub fn encoder_layers(arch: &Architecture) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut s = arch.input_size;
    for (i, &c) in arch.encoder.iter().enumerate() {
        out.push(LayerSpec::conv(i + 1, s, c));
        if i + 1 < arch.encoder.len() {
            s /= 2;
            out.push(LayerSpec {
                name: format!("Pool{}", i + 1),
                kind: LayerKind::Pool,
                kernel: Some(2),
                stride: Some(2),
                output: (s, s, c),
                skip: None,
            });
        }
    }
    out
}

/// Encoder layers followed by the flatten + dense classifier output.
pub fn classifier_layers(arch: &Architecture) -> Vec<LayerSpec> {
    let mut out = encoder_layers(arch);
    out.push(LayerSpec {
        name: "Dense".into(),
        kind: LayerKind::Dense,
        kernel: None,
        stride: None,
        output: (1, 1, 1),
        skip: None,
    });
    out
}

/// Encoder, six (or `pools`) upsample/conv/concat/conv blocks, final conv.
pub fn unet_layers(arch: &Architecture) -> Vec<LayerSpec> {
    let mut out = encoder_layers(arch);
    let e = arch.encoder.len();
    let mut s = arch.input_size >> arch.pools();
    let mut c = *arch.encoder.last().expect("non-empty encoder");
    let mut conv = e;
    for (j, &(up_c, cat_c)) in arch.decoder.iter().enumerate() {
        s *= 2;
        out.push(LayerSpec {
            name: format!("Upsample{}", j + 1),
            kind: LayerKind::Upsample,
            kernel: Some(2),
            stride: Some(2),
            output: (s, s, c),
            skip: None,
        });
        conv += 1;
        out.push(LayerSpec::conv(conv, s, up_c));
        let skip_idx = e - 1 - j;
        let skip = format!("conv{skip_idx}");
        out.push(LayerSpec {
            name: format!("Concat(Upsample{}, {skip})", j + 1),
            kind: LayerKind::Concat,
            kernel: None,
            stride: None,
            output: (s, s, up_c + arch.encoder[skip_idx - 1]),
            skip: Some(skip),
        });
        conv += 1;
        out.push(LayerSpec::conv(conv, s, cat_c));
        c = cat_c;
    }
    out.push(LayerSpec::conv(conv + 1, s, 1));
    out
}
