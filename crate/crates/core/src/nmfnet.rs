//! Full network: ResNet8 on RGB, ResNet8 on the laser distance map, the point
//! branch, 2D–3D fusion and the steering head.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloudnet::{CloudBranch, CloudConfig, CloudOutput};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Linear};
use crate::tensor::{Graph, Mode, ParamStore, Real, Tensor, Var};

/// Which input branches a model contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    pub rgb: bool,
    pub laser: bool,
    pub cloud: bool,
}

impl ModalitySet {
    pub const ALL: Self = Self {
        rgb: true,
        laser: true,
        cloud: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.rgb || self.laser || self.cloud)
    }

    /// The seven non-empty subsets in ablation-table order.
    pub fn ablation_rows() -> [Self; 7] {
        let m = |rgb, laser, cloud| Self { rgb, laser, cloud };
        [
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, false, true),
            m(true, true, false),
            m(false, true, true),
            m(true, true, true),
        ]
    }

    /// Human-readable row label.
    pub fn label(&self) -> &'static str {
        match (self.rgb, self.laser, self.cloud) {
            (true, false, false) => "RGB",
            (false, true, false) => "Distance Map",
            (false, false, true) => "Point Cloud",
            (true, false, true) => "RGB + Point Cloud",
            (true, true, false) => "RGB + Distance Map",
            (false, true, true) => "Distance Map + Point Cloud",
            (true, true, true) => "Fusion",
            (false, false, false) => "None",
        }
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.rgb {
            parts.push("rgb");
        }
        if self.laser {
            parts.push("laser");
        }
        if self.cloud {
            parts.push("cloud");
        }
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Self {
            rgb: false,
            laser: false,
            cloud: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "rgb" => m.rgb = true,
                "laser" => m.laser = true,
                "cloud" => m.cloud = true,
                other => return Err(Error::Config(format!("unknown modality {other:?}"))),
            }
        }
        if m.is_empty() {
            return Err(Error::Config("empty modality set".into()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub stem_kernel: usize,
    /// Output channels of the three residual blocks; the stem uses the first.
    pub widths: Vec<usize>,
}

impl ResNetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem_kernel: 5,
            widths: vec![32, 64, 128],
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("three blocks")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub modalities: ModalitySet,
    pub rgb: ResNetConfig,
    pub laser: ResNetConfig,
    pub cloud: CloudConfig,
    /// 1×1 fusion convolutions applied to `concat(rgb, cloud)`.
    pub fusion: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            modalities: ModalitySet::ALL,
            rgb: ResNetConfig::new(3),
            laser: ResNetConfig::new(1),
            cloud: CloudConfig::default(),
            fusion: vec![512, 256],
        }
    }
}

impl NetConfig {
    pub fn with_modalities(modalities: ModalitySet) -> Self {
        Self {
            modalities,
            ..Self::default()
        }
    }

    /// Small widths for finite-difference checks.
    pub fn tiny() -> Self {
        let res = |c| ResNetConfig {
            in_channels: c,
            stem_kernel: 3,
            widths: vec![2, 3, 2],
        };
        Self {
            modalities: ModalitySet::ALL,
            rgb: res(3),
            laser: res(1),
            cloud: CloudConfig {
                tnet_point: vec![4, 5],
                tnet_head: vec![4],
                lift: vec![3, 3],
                global: vec![4, 5],
            },
            fusion: vec![4, 3],
        }
    }

    /// The 2D–3D fusion block exists only when both RGB and cloud are present.
    pub fn has_fusion(&self) -> bool {
        self.modalities.rgb && self.modalities.cloud
    }

    pub fn head_inputs(&self) -> usize {
        let m = self.modalities;
        let mut n = 0;
        if self.has_fusion() {
            n += *self.fusion.last().expect("fusion widths");
        } else {
            if m.rgb {
                n += self.rgb.feature_dim();
            }
            if m.cloud {
                n += self.cloud.feature_dim();
            }
        }
        if m.laser {
            n += self.laser.feature_dim();
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("empty modality set".into()));
        }
        for (name, r) in [("rgb", &self.rgb), ("laser", &self.laser)] {
            if r.widths.len() != 3 || r.widths.contains(&0) || r.stem_kernel == 0 || r.in_channels == 0 {
                return Err(Error::Config(format!("{name} branch needs three non-zero block widths")));
            }
        }
        let c = &self.cloud;
        for (name, w) in [
            ("tnet_point", &c.tnet_point),
            ("lift", &c.lift),
            ("global", &c.global),
        ] {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config(format!("cloud {name} widths must be non-empty")));
            }
        }
        if self.has_fusion() && (self.fusion.is_empty() || self.fusion.contains(&0)) {
            return Err(Error::Config("fusion widths must be non-empty".into()));
        }
        Ok(())
    }
}

/// Pre-activation residual block: BN→ReLU→conv3×3/2→BN→ReLU→conv3×3, plus a
/// strided 1×1 projection of the input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
    pub skip: Conv,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cin),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 2, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 2, 0, rng),
        }
    }

    fn forward<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.bn1.forward(store, g, x, mode)?;
        let h = g.relu(h);
        let h = self.conv1.forward(store, g, h)?;
        let h = self.bn2.forward(store, g, h, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(store, g, h)?;
        let s = self.skip.forward(store, g, x)?;
        g.add(h, s)
    }
}

/// Stem (strided conv + 3×3/2 max pool), three residual blocks, a closing
/// batchnorm and ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct ResNet8 {
    pub config: ResNetConfig,
    pub stem: Conv,
    pub blocks: Vec<ResBlock>,
    pub bn_out: BatchNorm,
}

/// Nodes produced by [`ResNet8::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ResNetOutput {
    /// `[B, F]`.
    pub feature: Var,
    /// `[B, F, h, w]` activations after the final ReLU.
    pub map: Var,
}

impl ResNet8 {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ResNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.stem_kernel;
        let stem = Conv::new(store, &format!("{name}.stem"), cfg.in_channels, cfg.widths[0], k, 2, k / 2, rng);
        let mut prev = cfg.widths[0];
        let blocks = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResBlock::new(store, &format!("{name}.block{i}"), prev, w, rng);
                prev = w;
                b
            })
            .collect();
        let bn_out = BatchNorm::new(store, &format!("{name}.bn_out"), prev);
        Self {
            config: cfg.clone(),
            stem,
            blocks,
            bn_out,
        }
    }

    /// Smallest input side the stride chain accepts.
    pub fn min_input_side(&self) -> usize {
        // the 3×3 pool needs a 3-wide stem output
        let k = self.config.stem_kernel;
        let pad = k / 2;
        (2 * 2 + k).saturating_sub(2 * pad).max(1)
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
    ) -> Result<ResNetOutput> {
        let s = g.shape(x).to_vec();
        let min = self.min_input_side();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] < min || s[3] < min {
            return Err(Error::dim(
                "resnet8",
                &s,
                &[s.first().copied().unwrap_or(0), self.config.in_channels, min, min],
            ));
        }
        let mut h = self.stem.forward(store, g, x)?;
        h = g.maxpool2d(h, 3, 2)?;
        for block in &self.blocks {
            h = block.forward(store, g, h, mode)?;
        }
        let h = self.bn_out.forward(store, g, h, mode)?;
        let map = g.relu(h);
        let feature = g.global_avg_pool(map)?;
        Ok(ResNetOutput { feature, map })
    }
}

/// Input tensors for one batch; absent branches are `None`.
#[derive(Clone, Debug, Default)]
pub struct ModelInput<T> {
    /// `[B, 3, H, W]` in `[0, 1]`.
    pub rgb: Option<Tensor<T>>,
    /// `[B, 1, H, W]` binary distance map.
    pub laser: Option<Tensor<T>>,
    /// `[B, N, 3]`.
    pub cloud: Option<Tensor<T>>,
}

impl<T: Real> ModelInput<T> {
    pub fn batch_size(&self) -> usize {
        [&self.rgb, &self.laser, &self.cloud]
            .into_iter()
            .flatten()
            .map(|t| t.shape()[0])
            .next()
            .unwrap_or(0)
    }

    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        ModelInput {
            rgb: self.rgb.as_ref().map(Tensor::cast),
            laser: self.laser.as_ref().map(Tensor::cast),
            cloud: self.cloud.as_ref().map(Tensor::cast),
        }
    }
}

/// Graph nodes for a bound batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct InputVars {
    pub rgb: Option<Var>,
    pub laser: Option<Var>,
    pub cloud: Option<Var>,
}

impl InputVars {
    pub fn bind<T: Real>(g: &mut Graph<T>, input: &ModelInput<T>) -> Self {
        Self {
            rgb: input.rgb.clone().map(|t| g.input(t)),
            laser: input.laser.clone().map(|t| g.input(t)),
            cloud: input.cloud.clone().map(|t| g.input(t)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[B, 1]`.
    pub steering: Var,
    pub rgb: Option<ResNetOutput>,
    pub laser: Option<ResNetOutput>,
    pub cloud: Option<CloudOutput>,
}

#[derive(Clone, Debug)]
pub struct NMFNet {
    pub config: NetConfig,
    pub rgb: Option<ResNet8>,
    pub laser: Option<ResNet8>,
    pub cloud: Option<CloudBranch>,
    /// Batchnorm on the pooled cloud feature, first of the layers after the max.
    pub cloud_norm: Option<BatchNorm>,
    pub fusion: Vec<Conv>,
    pub head: Linear,
}

impl NMFNet {
    /// Registers every parameter of `config` in `store`, initialized from `seed`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.modalities;
        let rgb = m.rgb.then(|| ResNet8::new(store, "rgb", &config.rgb, &mut rng));
        let laser = m.laser.then(|| ResNet8::new(store, "laser", &config.laser, &mut rng));
        let cloud = m.cloud.then(|| CloudBranch::new(store, "cloud", &config.cloud, &mut rng));
        // A max over many points gives large, strongly correlated features;
        // the small gain keeps the head stable under the fixed learning rate.
        let cloud_norm = m
            .cloud
            .then(|| BatchNorm::with_gain(store, "cloud_norm", config.cloud.feature_dim(), CLOUD_NORM_GAIN));
        let mut fusion = Vec::new();
        if config.has_fusion() {
            let mut prev = config.rgb.feature_dim() + config.cloud.feature_dim();
            for (i, &w) in config.fusion.iter().enumerate() {
                fusion.push(Conv::new(store, &format!("fusion.conv{i}"), prev, w, 1, 1, 0, &mut rng));
                prev = w;
            }
        }
        // starts as the constant-zero predictor
        let head = Linear::zeros(store, "head", config.head_inputs(), 1);
        Ok(Self {
            config: config.clone(),
            rgb,
            laser,
            cloud,
            cloud_norm,
            fusion,
            head,
        })
    }

    /// Concatenates `[B, F]` RGB and `[B, F']` cloud features and runs the
    /// 1×1 fusion convolutions, giving `[B, G]`.
    pub fn fuse_2d3d<T: Real>(&self, store: &ParamStore<T>, g: &mut Graph<T>, rgb: Var, cloud: Var) -> Result<Var> {
        let (a, b) = (g.shape(rgb).to_vec(), g.shape(cloud).to_vec());
        if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
            return Err(Error::dim("fuse_2d3d", &a, &b));
        }
        let cat = g.concat(&[rgb, cloud], 1)?;
        let mut h = g.reshape(cat, &[a[0], a[1] + b[1], 1, 1])?;
        for conv in &self.fusion {
            h = conv.forward(store, g, h)?;
            h = g.relu(h);
        }
        let c = g.shape(h)[1];
        g.reshape(h, &[a[0], c])
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        inputs: InputVars,
        mode: Mode,
    ) -> Result<Outputs> {
        let need = |v: Option<Var>, name| v.ok_or(Error::MissingModality(name));
        let rgb = match &self.rgb {
            Some(net) => Some(net.forward(store, g, need(inputs.rgb, "rgb")?, mode)?),
            None => None,
        };
        let laser = match &self.laser {
            Some(net) => Some(net.forward(store, g, need(inputs.laser, "laser")?, mode)?),
            None => None,
        };
        let cloud = match &self.cloud {
            Some(net) => Some(net.forward(store, g, need(inputs.cloud, "cloud")?, mode)?),
            None => None,
        };
        let cloud_feature = match (&cloud, &self.cloud_norm) {
            (Some(c), Some(norm)) => Some(norm.forward(store, g, c.feature, mode)?),
            _ => None,
        };
        let mut parts = Vec::with_capacity(3);
        match (&rgb, cloud_feature) {
            (Some(r), Some(c)) => parts.push(self.fuse_2d3d(store, g, r.feature, c)?),
            (r, c) => {
                parts.extend(r.map(|r| r.feature));
                parts.extend(c);
            }
        }
        parts.extend(laser.map(|l| l.feature));
        let joined = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let steering = self.head.forward(store, g, joined)?;
        Ok(Outputs {
            steering,
            rgb,
            laser,
            cloud,
        })
    }
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: NMFNet,
    pub params: ParamStore<f32>,
}

/// Initial `gamma` of the pooled-cloud batchnorm.
pub const CLOUD_NORM_GAIN: f64 = 0.1;

const MAGIC: &[u8] = b"NMFNET1\n";

impl Model {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = NMFNet::new(&mut params, config, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn modalities(&self) -> ModalitySet {
        self.net.config.modalities
    }

    /// Eval-mode steering predictions for a batch.
    pub fn predict(&self, input: &ModelInput<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let vars = InputVars::bind(&mut g, input);
        let out = self.net.forward(&self.params, &mut g, vars, Mode::Eval)?;
        Ok(g.value(out.steering).data().to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for id in self.params.ids() {
            let shape: Vec<String> = self.params.get(id).shape().iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("{} {} f32\n", self.params.name(id), shape.join("x")).as_bytes());
        }
        out.push(b'\n');
        for id in self.params.ids() {
            for v in self.params.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Parses a checkpoint, inferring the architecture from parameter names
    /// and shapes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if !bytes.starts_with(MAGIC) {
            return Err(bad("missing magic"));
        }
        let rest = &bytes[MAGIC.len()..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("unterminated header"))?;
        let header = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))?;
        let mut entries = Vec::new();
        for line in header.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 || f[2] != "f32" {
                return Err(bad(&format!("bad header line {line:?}")));
            }
            let shape = f[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(&format!("bad shape in {line:?}")))?;
            entries.push((f[0].to_string(), shape));
        }
        let config = infer_config(&entries)?;
        let mut model = Self::new(&config, 0)?;
        if model.params.len() != entries.len() {
            return Err(bad(&format!(
                "expected {} tensors for the inferred architecture, found {}",
                model.params.len(),
                entries.len()
            )));
        }
        let mut payload = &rest[end + 2..];
        for (id, (name, shape)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&entries) {
            if model.params.name(id) != name || model.params.get(id).shape() != &shape[..] {
                return Err(bad(&format!("unexpected tensor {name} {shape:?}")));
            }
            let n = model.params.get(id).numel();
            if payload.len() < n * 4 {
                return Err(bad("truncated payload"));
            }
            for (dst, c) in model.params.get_mut(id).data_mut().iter_mut().zip(payload[..n * 4].chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap());
            }
            payload = &payload[n * 4..];
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(model)
    }
}

fn infer_config(entries: &[(String, Vec<usize>)]) -> Result<NetConfig> {
    let shape = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    let has = |prefix: &str| entries.iter().any(|(n, _)| n.starts_with(prefix));
    let widths = |prefix: &str| {
        (0..)
            .map_while(|i| shape(&format!("{prefix}{i}.weight")).map(|s| s[s.len() - 1]))
            .collect::<Vec<_>>()
    };
    let modalities = ModalitySet {
        rgb: has("rgb."),
        laser: has("laser."),
        cloud: has("cloud."),
    };
    let mut config = NetConfig::with_modalities(modalities);
    for (name, cfg) in [("rgb", &mut config.rgb), ("laser", &mut config.laser)] {
        if let Some(s) = shape(&format!("{name}.stem.weight")) {
            cfg.in_channels = s[1];
            cfg.stem_kernel = s[2];
            cfg.widths = (0..)
                .map_while(|i| shape(&format!("{name}.block{i}.conv1.weight")).map(|s| s[0]))
                .collect();
        }
    }
    if modalities.cloud {
        config.cloud = CloudConfig {
            tnet_point: widths("cloud.tnet3.point"),
            tnet_head: widths("cloud.tnet3.fc"),
            lift: widths("cloud.lift"),
            global: widths("cloud.global"),
        };
    }
    let fusion: Vec<usize> = (0..)
        .map_while(|i| shape(&format!("fusion.conv{i}.weight")).map(|s| s[0]))
        .collect();
    if !fusion.is_empty() {
        config.fusion = fusion;
    }
    config.validate().map_err(|e| Error::Checkpoint(format!("cannot infer architecture: {e}")))?;
    Ok(config)
}
