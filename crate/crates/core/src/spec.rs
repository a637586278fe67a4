//! Backbone descriptions and width slicing rules.
//!
//! A [`SlimmableModelSpec`] describes the full-width network. Any narrower
//! sub-network is derived from it by keeping the leading `sliced_channels`
//! channels of every sliceable layer; the input channels of the first layer
//! and the class count of the classifier never change.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ResolutionSet;
use crate::error::{Error, Result};

/// Fraction of channels kept in every sliceable layer, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WidthMultiplier(f64);

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 && value <= 1.0 {
            Ok(WidthMultiplier(value))
        } else {
            Err(Error::invalid(format!("width multiplier {value} outside (0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_full(self) -> bool {
        self.0 == 1.0
    }

    /// Integer key in millionths, used to index per-config tables.
    pub fn key(self) -> u32 {
        (self.0 * 1e6).round() as u32
    }
}

impl TryFrom<f64> for WidthMultiplier {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        WidthMultiplier::new(value)
    }
}

impl From<WidthMultiplier> for f64 {
    fn from(w: WidthMultiplier) -> f64 {
        w.0
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}x", self.0)
    }
}

/// Number of channels kept at `width` for a layer with `base_channels` at
/// full width: the nearest multiple of `divisor`, at least one divisor group,
/// never more than `base_channels`.
pub fn sliced_channels(base_channels: usize, width: f64, divisor: usize) -> Result<usize> {
    if !(width.is_finite() && width > 0.0 && width <= 1.0) {
        return Err(Error::invalid(format!("width {width} outside (0, 1]")));
    }
    if base_channels == 0 || divisor == 0 {
        return Err(Error::invalid("channel count and divisor must be positive"));
    }
    let groups = (base_channels as f64 * width / divisor as f64).round() as usize;
    Ok((groups * divisor).max(divisor).min(base_channels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Convolution,
    DepthwiseConvolution,
    GroupConvolution,
    FullyConnected,
    Normalization,
    /// Global average pooling.
    Pooling,
    /// ReLU.
    Activation,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Convolution | LayerKind::DepthwiseConvolution | LayerKind::GroupConvolution
        )
    }

    pub fn has_params(self) -> bool {
        self.is_conv() || matches!(self, LayerKind::FullyConnected | LayerKind::Normalization)
    }

    /// Layers whose channel count follows their input rather than a base count.
    fn is_passthrough(self) -> bool {
        matches!(self, LayerKind::Normalization | LayerKind::Pooling | LayerKind::Activation)
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Full-width input channels. Zero on pass-through layers means "inherit".
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::Convolution, in_channels, out_channels, kernel, stride, groups: 1 }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DepthwiseConvolution,
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            groups: channels,
        }
    }

    pub fn group_conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        LayerSpec { kind: LayerKind::GroupConvolution, in_channels, out_channels, kernel, stride, groups }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            groups: 1,
        }
    }

    pub fn norm(channels: usize) -> Self {
        Self::passthrough(LayerKind::Normalization, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::passthrough(LayerKind::Activation, channels)
    }

    pub fn global_pool(channels: usize) -> Self {
        Self::passthrough(LayerKind::Pooling, channels)
    }

    fn passthrough(kind: LayerKind, channels: usize) -> Self {
        LayerSpec { kind, in_channels: channels, out_channels: channels, kernel: 1, stride: 1, groups: 1 }
    }

    /// Symmetric zero padding used by every convolution.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Full-width backbone from which every sub-network is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimmableModelSpec {
    #[serde(default)]
    pub name: String,
    pub input_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_divisor")]
    pub channel_divisor: usize,
    pub width_lower_bound: WidthMultiplier,
    pub resolutions: ResolutionSet,
    pub layers: Vec<LayerSpec>,
}

fn default_divisor() -> usize {
    8
}

/// A (width, input resolution) pair: the unit of execution, costing and planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub width: WidthMultiplier,
    pub resolution: usize,
}

impl SubnetConfig {
    pub fn new(width: f64, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        Ok(SubnetConfig { width: WidthMultiplier::new(width)?, resolution })
    }

    pub fn key(&self) -> ConfigKey {
        ConfigKey { width: self.width.key(), resolution: self.resolution as u32 }
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.width, self.resolution)
    }
}

/// Hashable identity of a [`SubnetConfig`] (width in millionths).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigKey {
    pub width: u32,
    pub resolution: u32,
}

/// Per-layer channel counts at one width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlicedLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Effective group count at this width (equals the channel count for depthwise).
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceArch {
    pub width: WidthMultiplier,
    pub layers: Vec<SlicedLayer>,
}

impl SlimmableModelSpec {
    /// Fills inherited channel counts on pass-through layers and validates
    /// the result.
    pub fn finalize(mut self) -> Result<Self> {
        let mut channels = self.input_channels;
        for layer in &mut self.layers {
            if layer.kind.is_passthrough() {
                if layer.in_channels == 0 {
                    layer.in_channels = channels;
                }
                if layer.out_channels == 0 {
                    layer.out_channels = layer.in_channels;
                }
            }
            if layer.kind == LayerKind::DepthwiseConvolution {
                layer.groups = layer.in_channels;
            }
            channels = layer.out_channels;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: SlimmableModelSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("backbone description: {e}")))?;
        raw.finalize()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model spec is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Error::invalid(format!("layer {i}: {msg}"));
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        if self.input_channels == 0 || self.num_classes == 0 || self.channel_divisor == 0 {
            return Err(Error::invalid("input channels, class count and divisor must be positive"));
        }
        let last = self.layers.len() - 1;
        let mut channels = self.input_channels;
        let mut pooled = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kernel == 0 || layer.stride == 0 || layer.groups == 0 {
                return Err(bad(i, "kernel, stride and groups must be >= 1".into()));
            }
            if layer.in_channels != channels {
                return Err(bad(
                    i,
                    format!("expects {} input channels, previous layer gives {channels}", layer.in_channels),
                ));
            }
            let sliced_in = i > 0;
            match layer.kind {
                LayerKind::Convolution | LayerKind::DepthwiseConvolution | LayerKind::GroupConvolution => {
                    if pooled {
                        return Err(bad(i, "convolution after global pooling".into()));
                    }
                    match layer.kind {
                        LayerKind::Convolution if layer.groups != 1 => {
                            return Err(bad(i, "plain convolution must have groups = 1".into()))
                        }
                        LayerKind::DepthwiseConvolution if layer.out_channels != layer.in_channels => {
                            return Err(bad(i, "depthwise convolution must keep the channel count".into()))
                        }
                        LayerKind::GroupConvolution => {
                            let g = layer.groups;
                            if layer.in_channels % g != 0 || layer.out_channels % g != 0 {
                                return Err(bad(i, format!("groups {g} must divide channel counts")));
                            }
                            // Sliced widths are multiples of the divisor, so the
                            // divisor must split into whole groups.
                            if self.channel_divisor % g != 0 {
                                return Err(bad(
                                    i,
                                    format!("groups {g} must divide channel divisor {}", self.channel_divisor),
                                ));
                            }
                            if !sliced_in && layer.in_channels % g != 0 {
                                return Err(bad(i, "groups must divide the input channels".into()));
                            }
                        }
                        _ => {}
                    }
                }
                LayerKind::FullyConnected => {
                    if !pooled {
                        return Err(bad(i, "fully-connected layer requires global pooling first".into()));
                    }
                }
                LayerKind::Pooling => pooled = true,
                LayerKind::Normalization | LayerKind::Activation => {
                    if layer.out_channels != layer.in_channels {
                        return Err(bad(i, "pass-through layer must keep the channel count".into()));
                    }
                }
            }
            let sliced_out = i != last && !layer.kind.is_passthrough();
            if sliced_out && layer.out_channels % self.channel_divisor != 0 {
                return Err(bad(
                    i,
                    format!(
                        "{} output channels not divisible by channel divisor {}",
                        layer.out_channels, self.channel_divisor
                    ),
                ));
            }
            channels = layer.out_channels;
        }
        let classifier = &self.layers[last];
        if classifier.kind != LayerKind::FullyConnected || classifier.out_channels != self.num_classes {
            return Err(Error::invalid(format!(
                "last layer must be a fully-connected classifier with {} outputs",
                self.num_classes
            )));
        }
        let stride = self.total_stride();
        for &r in self.resolutions.values() {
            if r < stride || r % stride != 0 {
                return Err(Error::invalid(format!(
                    "resolution {r} incompatible with total stride {stride}"
                )));
            }
        }
        Ok(())
    }

    /// Product of all convolution strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_conv()).map(|l| l.stride).product()
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let stride = self.total_stride();
        if resolution == 0 || resolution % stride != 0 {
            return Err(Error::invalid(format!(
                "resolution {resolution} incompatible with total stride {stride}"
            )));
        }
        Ok(())
    }

    /// Resolves per-layer channel counts at `width`. Only checks that the
    /// width is a valid multiplier; the lower bound is enforced when a
    /// sub-network is materialized.
    pub fn slice(&self, width: WidthMultiplier) -> Result<SliceArch> {
        let last = self.layers.len() - 1;
        let mut channels = self.input_channels;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let in_channels = channels;
            let (out_channels, groups) = match layer.kind {
                LayerKind::Normalization | LayerKind::Pooling | LayerKind::Activation => (in_channels, 1),
                LayerKind::DepthwiseConvolution => (in_channels, in_channels),
                _ => {
                    let out = if i == last {
                        layer.out_channels
                    } else {
                        sliced_channels(layer.out_channels, width.value(), self.channel_divisor)?
                    };
                    (out, layer.groups)
                }
            };
            layers.push(SlicedLayer { in_channels, out_channels, groups });
            channels = out_channels;
        }
        Ok(SliceArch { width, layers })
    }

    /// Stable SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_lower_bound(mut self, lower: WidthMultiplier) -> Self {
        self.width_lower_bound = lower;
        self
    }

    pub fn with_resolutions(mut self, resolutions: ResolutionSet) -> Result<Self> {
        self.resolutions = resolutions;
        self.validate()?;
        Ok(self)
    }

    /// ImageNet MobileNet v1 (width [0.25, 1.0], resolutions {224, 192, 160, 128}).
    pub fn mobilenet_v1(num_classes: usize) -> Self {
        let blocks: [(usize, usize, usize); 13] = [
            (32, 64, 1),
            (64, 128, 2),
            (128, 128, 1),
            (128, 256, 2),
            (256, 256, 1),
            (256, 512, 2),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 1024, 2),
            (1024, 1024, 1),
        ];
        let layers = mobilenet_layers(3, 32, 2, &blocks, num_classes);
        SlimmableModelSpec {
            name: "mobilenet_v1".into(),
            input_channels: 3,
            num_classes,
            channel_divisor: 8,
            width_lower_bound: WidthMultiplier(0.25),
            resolutions: ResolutionSet::new(vec![224, 192, 160, 128]).expect("static set"),
            layers,
        }
        .finalize()
        .expect("static spec is valid")
    }

    /// MobileNet-v1-style stack for 32x32 inputs (total stride 4,
    /// resolutions {32, 28, 24, 20}).
    pub fn desk_mobilenet(num_classes: usize) -> Self {
        let blocks: [(usize, usize, usize); 5] =
            [(32, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1)];
        let layers = mobilenet_layers(3, 32, 1, &blocks, num_classes);
        SlimmableModelSpec {
            name: "desk_mobilenet".into(),
            input_channels: 3,
            num_classes,
            channel_divisor: 8,
            width_lower_bound: WidthMultiplier(0.25),
            resolutions: ResolutionSet::new(vec![32, 28, 24, 20]).expect("static set"),
            layers,
        }
        .finalize()
        .expect("static spec is valid")
    }
}

fn mobilenet_layers(
    input_channels: usize,
    stem: usize,
    stem_stride: usize,
    blocks: &[(usize, usize, usize)],
    num_classes: usize,
) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::conv(input_channels, stem, 3, stem_stride),
        LayerSpec::norm(stem),
        LayerSpec::relu(stem),
    ];
    for &(cin, cout, stride) in blocks {
        layers.push(LayerSpec::depthwise(cin, 3, stride));
        layers.push(LayerSpec::norm(cin));
        layers.push(LayerSpec::relu(cin));
        layers.push(LayerSpec::conv(cin, cout, 1, 1));
        layers.push(LayerSpec::norm(cout));
        layers.push(LayerSpec::relu(cout));
    }
    let last = blocks.last().map(|b| b.1).unwrap_or(stem);
    layers.push(LayerSpec::global_pool(last));
    layers.push(LayerSpec::fc(last, num_classes));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliced_channels_examples() {
        assert_eq!(sliced_channels(64, 1.0, 8).unwrap(), 64);
        assert_eq!(sliced_channels(64, 0.25, 8).unwrap(), 16);
        assert_eq!(sliced_channels(100, 0.33, 8).unwrap(), 32);
    }

    #[test]
    fn sliced_channels_floor_and_cap() {
        assert_eq!(sliced_channels(64, 0.01, 8).unwrap(), 8);
        // 100 * 1.0 / 8 rounds up to 13 groups; capped at the base count.
        assert_eq!(sliced_channels(100, 1.0, 8).unwrap(), 100);
    }

    #[test]
    fn sliced_channels_rejects_bad_width() {
        for w in [0.0, -0.5, 1.01, f64::NAN] {
            assert!(matches!(sliced_channels(64, w, 8), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn sliced_channels_monotone() {
        for base in [8usize, 16, 24, 64, 256, 1024] {
            let mut prev = 0;
            for i in 1..=100 {
                let c = sliced_channels(base, i as f64 / 100.0, 8).unwrap();
                assert!(c >= prev && c <= base);
                prev = c;
            }
            assert_eq!(prev, base);
        }
    }

    #[test]
    fn two_conv_net_at_half_width() {
        let spec = SlimmableModelSpec {
            name: "two_conv".into(),
            input_channels: 3,
            num_classes: 10,
            channel_divisor: 8,
            width_lower_bound: WidthMultiplier(0.25),
            resolutions: ResolutionSet::new(vec![8]).unwrap(),
            layers: vec![
                LayerSpec::conv(3, 64, 3, 1),
                LayerSpec::conv(64, 128, 3, 1),
                LayerSpec::global_pool(128),
                LayerSpec::fc(128, 10),
            ],
        }
        .finalize()
        .unwrap();
        let arch = spec.slice(WidthMultiplier::new(0.5).unwrap()).unwrap();
        let chans: Vec<_> = arch.layers.iter().map(|l| (l.in_channels, l.out_channels)).collect();
        assert_eq!(chans, vec![(3, 32), (32, 64), (64, 64), (64, 10)]);
    }

    #[test]
    fn toml_round_trip_preserves_spec() {
        let spec = SlimmableModelSpec::desk_mobilenet(10);
        let text = spec.to_toml_string();
        let back = SlimmableModelSpec::from_toml_str(&text).unwrap();
        assert_eq!(spec, back);
        assert_eq!(spec.hash(), back.hash());
    }

    #[test]
    fn toml_pass_through_layers_inherit_channels() {
        let text = r#"
            input_channels = 3
            num_classes = 4
            width_lower_bound = 0.5
            resolutions = [16, 8]

            [[layers]]
            kind = "convolution"
            in_channels = 3
            out_channels = 16
            kernel = 3
            stride = 2

            [[layers]]
            kind = "normalization"

            [[layers]]
            kind = "activation"

            [[layers]]
            kind = "pooling"

            [[layers]]
            kind = "fully_connected"
            in_channels = 16
            out_channels = 4
        "#;
        let spec = SlimmableModelSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.channel_divisor, 8);
        assert_eq!(spec.layers[1].in_channels, 16);
        assert_eq!(spec.layers[3].out_channels, 16);
    }

    #[test]
    fn rejects_incompatible_channels() {
        let mut spec = SlimmableModelSpec::desk_mobilenet(10);
        spec.layers[3].in_channels = 40;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_resolution_not_matching_stride() {
        let spec = SlimmableModelSpec::desk_mobilenet(10);
        assert!(spec.clone().with_resolutions(ResolutionSet::new(vec![30]).unwrap()).is_err());
        assert!(spec.check_resolution(22).is_err());
        assert!(spec.check_resolution(20).is_ok());
    }

    #[test]
    fn group_conv_must_fit_divisor() {
        let spec = SlimmableModelSpec {
            name: String::new(),
            input_channels: 3,
            num_classes: 2,
            channel_divisor: 8,
            width_lower_bound: WidthMultiplier(0.5),
            resolutions: ResolutionSet::new(vec![4]).unwrap(),
            layers: vec![
                LayerSpec::conv(3, 32, 3, 1),
                LayerSpec::group_conv(32, 32, 3, 1, 16),
                LayerSpec::global_pool(32),
                LayerSpec::fc(32, 2),
            ],
        };
        assert!(spec.clone().finalize().is_err());
        let mut ok = spec;
        ok.layers[1].groups = 4;
        assert!(ok.finalize().is_ok());
    }

    #[test]
    fn mobilenet_presets_validate() {
        let m = SlimmableModelSpec::mobilenet_v1(1000);
        assert_eq!(m.total_stride(), 32);
        let d = SlimmableModelSpec::desk_mobilenet(10);
        assert_eq!(d.total_stride(), 4);
    }
}
