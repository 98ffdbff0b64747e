//! On-disk dataset: generation, manifest, stratified split and batching.
//!
//! Layout: `<root>/<env>/<episode>/frame_<k>.{ppm,scan,cloud}` plus
//! `<root>/manifest.tsv`. Distance maps are not stored; they are rebuilt
//! from the scans at load time.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloudnet::{clouds_to_tensor, sample_cloud, PointCloud, DEFAULT_SAMPLES};
use crate::error::{Error, Result};
use crate::lasermap::{scan_to_distance_map, DistanceMap, DistanceMapConfig, LaserScan};
use crate::nmfnet::{ModalitySet, ModelInput};
use crate::pnm::Image;
use crate::simworld::{collect_episode, derive_seed, generate_world, Archetype, EpisodeConfig, STEP_DT};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const FORMAT_VERSION: &str = "nmfnet-dataset 1";
const COLUMNS: &str = "frame_id\tenv\tepisode\tstep\ttimestamp\tsteering\tdr_flag\trgb_path\tscan_path\tcloud_path";

/// One labeled, synchronized frame on disk. Paths are relative to the root.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub env: Archetype,
    pub episode: usize,
    pub step: usize,
    pub timestamp: f64,
    /// In `[-1, 1]`, positive left.
    pub steering: f64,
    pub dr_flag: bool,
    pub rgb_path: PathBuf,
    pub scan_path: PathBuf,
    pub cloud_path: PathBuf,
}

impl FrameRecord {
    fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.frame_id,
            self.env,
            self.episode,
            self.step,
            self.timestamp,
            self.steering,
            u8::from(self.dr_flag),
            self.rgb_path.display(),
            self.scan_path.display(),
            self.cloud_path.display()
        )
    }

    fn from_row(line: &str, path: &Path) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(Error::format(path, format!("expected 10 columns, found {}", f.len())));
        }
        let bad = |what: &str| Error::format(path, format!("bad {what} in row {line:?}"));
        let steering: f64 = f[5].parse().map_err(|_| bad("steering"))?;
        if !steering.is_finite() {
            return Err(bad("steering"));
        }
        Ok(Self {
            frame_id: f[0].parse().map_err(|_| bad("frame_id"))?,
            env: f[1].parse().map_err(|_| bad("env"))?,
            episode: f[2].parse().map_err(|_| bad("episode"))?,
            step: f[3].parse().map_err(|_| bad("step"))?,
            timestamp: f[4].parse().map_err(|_| bad("timestamp"))?,
            steering,
            dr_flag: match f[6] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("dr_flag")),
            },
            rgb_path: f[7].into(),
            scan_path: f[8].into(),
            cloud_path: f[9].into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// `key: value` lines written as `# ` comments above the column header.
    pub header: Vec<(String, String)>,
    pub records: Vec<FrameRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "{COLUMNS}");
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_row());
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header = Vec::new();
        let mut records = Vec::new();
        let mut seen_columns = false;
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(": ").unwrap_or((rest, ""));
                header.push((k.to_string(), v.to_string()));
            } else if !seen_columns {
                if line != COLUMNS {
                    return Err(Error::format(path, "missing column header"));
                }
                seen_columns = true;
            } else {
                records.push(FrameRecord::from_row(line, path)?);
            }
        }
        let m = Self { header, records };
        if m.get("format") != Some(FORMAT_VERSION) {
            return Err(Error::format(path, "unknown manifest format"));
        }
        let mut ids: Vec<u64> = m.records.iter().map(|r| r.frame_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format(path, "duplicate frame_id"));
        }
        Ok(m)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        Self::parse(&fs::read_to_string(&path)?, &path)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST), self.to_text())?;
        Ok(())
    }

    /// Records per environment.
    pub fn counts(&self) -> BTreeMap<Archetype, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.env).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub envs: Vec<Archetype>,
    pub episodes: usize,
    pub frames: usize,
    /// Fraction of episodes per environment rendered with randomized textures.
    pub dr_fraction: f64,
    pub seed: u64,
    pub episode: EpisodeConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            envs: Archetype::ALL.to_vec(),
            episodes: 20,
            frames: 100,
            dr_fraction: 0.45,
            seed: 0,
            episode: EpisodeConfig::default(),
        }
    }
}

/// Episodes of one environment that get randomized textures: exactly
/// `round(fraction × episodes)` of them, chosen by seed.
pub fn dr_episodes(episodes: usize, fraction: f64, seed: u64, env_index: u64) -> Vec<bool> {
    let n = (fraction * episodes as f64).round() as usize;
    let mut order: Vec<usize> = (0..episodes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD2, env_index)));
    let mut flags = vec![false; episodes];
    for &e in &order[..n.min(episodes)] {
        flags[e] = true;
    }
    flags
}

/// Simulates every episode and writes frames plus manifest under `root`.
/// The world and episode streams are derived from `(seed, env, episode)`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&cfg.dr_fraction) {
        return Err(Error::Config(format!("dr fraction {} outside [0, 1]", cfg.dr_fraction)));
    }
    fs::create_dir_all(root)?;
    let mut records = Vec::new();
    for &env in &cfg.envs {
        let ei = env as u64;
        let flags = dr_episodes(cfg.episodes, cfg.dr_fraction, cfg.seed, ei);
        for (episode, &dr) in flags.iter().enumerate() {
            let world = generate_world(env, derive_seed(cfg.seed, ei, episode as u64))?;
            let ep_cfg = EpisodeConfig {
                frames: cfg.frames,
                ..cfg.episode
            };
            let frames = collect_episode(&world, &ep_cfg, dr, derive_seed(cfg.seed, 0x100 + ei, episode as u64))?;
            let dir = PathBuf::from(env.name()).join(format!("{episode:03}"));
            fs::create_dir_all(root.join(&dir))?;
            for f in frames {
                let stem = format!("frame_{:04}", f.step);
                let rec = FrameRecord {
                    frame_id: (ei * cfg.episodes as u64 + episode as u64) * cfg.frames as u64 + f.step as u64,
                    env,
                    episode,
                    step: f.step,
                    timestamp: f.timestamp,
                    steering: f.steering,
                    dr_flag: f.dr_flag,
                    rgb_path: dir.join(format!("{stem}.ppm")),
                    scan_path: dir.join(format!("{stem}.scan")),
                    cloud_path: dir.join(format!("{stem}.cloud")),
                };
                f.sensors.rgb.write(&root.join(&rec.rgb_path))?;
                fs::write(root.join(&rec.scan_path), f.sensors.scan.to_text())?;
                f.sensors.cloud.write(&root.join(&rec.cloud_path))?;
                records.push(rec);
            }
        }
    }
    let cam = &cfg.episode.sensors.camera;
    let laser = &cfg.episode.sensors.laser;
    let envs: Vec<&str> = cfg.envs.iter().map(|e| e.name()).collect();
    let header = vec![
        ("format".into(), FORMAT_VERSION.into()),
        ("steering".into(), "normalized to [-1, 1]; +1 full left, -1 full right".into()),
        (
            "camera".into(),
            format!(
                "{}x{} focal {} cx {} cy {} height {} m max_depth {} m",
                cam.width, cam.height, cam.focal, cam.cx, cam.cy, cam.mount_height, cam.max_depth
            ),
        ),
        (
            "laser".into(),
            format!("{} beams over 180 deg, max_range {} m, beam 0 left", laser.beams, laser.max_range),
        ),
        ("envs".into(), envs.join(",")),
        ("episodes".into(), cfg.episodes.to_string()),
        ("frames".into(), cfg.frames.to_string()),
        ("stride".into(), format!("{} steps of {} s per frame", cfg.episode.stride, STEP_DT)),
        ("action_noise".into(), cfg.episode.action_noise.to_string()),
        ("dr_fraction".into(), cfg.dr_fraction.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ];
    let manifest = Manifest { header, records };
    manifest.write(root)?;
    Ok(manifest)
}

/// Stratified split: within each environment, and within each
/// randomization flag, a seeded shuffle sends `round(fraction × n)` records
/// to train. Deterministic in `seed`.
pub fn split(records: &[FrameRecord], train_fraction: f64, seed: u64) -> Result<(Vec<FrameRecord>, Vec<FrameRecord>)> {
    if records.len() < 10 {
        return Err(Error::DatasetTooSmall(records.len()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut groups: BTreeMap<(Archetype, bool), Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.env, r.dr_flag)).or_default().push(r);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for env in Archetype::ALL {
        let env_total: usize = groups.iter().filter(|((e, _), _)| *e == env).map(|(_, v)| v.len()).sum();
        let env_train = (train_fraction * env_total as f64).round() as usize;
        let dr_total = groups.get(&(env, true)).map_or(0, |v| v.len());
        let dr_train = ((train_fraction * dr_total as f64).round() as usize).min(env_train);
        for (flag, take) in [(true, dr_train), (false, env_train - dr_train)] {
            let Some(group) = groups.get(&(env, flag)) else { continue };
            let mut group = group.clone();
            group.sort_by_key(|r| r.frame_id);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, env as u64, flag as u64));
            group.shuffle(&mut rng);
            let take = take.min(group.len());
            train.extend(group[..take].iter().map(|r| (*r).clone()));
            test.extend(group[take..].iter().map(|r| (*r).clone()));
        }
    }
    train.sort_by_key(|r| r.frame_id);
    test.sort_by_key(|r| r.frame_id);
    Ok((train, test))
}

/// Loading parameters shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub n_sample: usize,
    pub map: DistanceMapConfig,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            n_sample: DEFAULT_SAMPLES,
            map: DistanceMapConfig::default(),
        }
    }
}

/// Decoded inputs of one frame; only requested modalities are present.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedFrame {
    pub frame_id: u64,
    pub env: Archetype,
    pub steering: f32,
    pub dr_flag: bool,
    pub rgb: Option<Image>,
    pub laser: Option<DistanceMap>,
    /// Sampled to `n_sample` points with the frame's fixed seed.
    pub cloud: Option<PointCloud>,
}

/// Seed used to sample a frame's cloud, fixed per frame.
pub fn cloud_seed(frame_id: u64) -> u64 {
    derive_seed(frame_id, 0xC10D, 0)
}

pub fn load_frame(root: &Path, r: &FrameRecord, modalities: ModalitySet, opts: &LoadOptions) -> Result<LoadedFrame> {
    let wrap = |e: Error| Error::Frame {
        frame_id: r.frame_id,
        source: Box::new(e),
    };
    let rgb = if modalities.rgb {
        let img = Image::read(&root.join(&r.rgb_path)).map_err(wrap)?;
        if img.channels != 3 {
            return Err(wrap(Error::format(&r.rgb_path, "expected an RGB image")));
        }
        Some(img)
    } else {
        None
    };
    let laser = if modalities.laser {
        let path = root.join(&r.scan_path);
        let text = fs::read_to_string(&path).map_err(|e| wrap(e.into()))?;
        let scan = LaserScan::from_text(&text, &path).map_err(wrap)?;
        Some(scan_to_distance_map(&scan, &opts.map).0)
    } else {
        None
    };
    let cloud = if modalities.cloud {
        let raw = PointCloud::read(&root.join(&r.cloud_path)).map_err(wrap)?;
        Some(sample_cloud(&raw, opts.n_sample, cloud_seed(r.frame_id)).map_err(wrap)?)
    } else {
        None
    };
    Ok(LoadedFrame {
        frame_id: r.frame_id,
        env: r.env,
        steering: r.steering as f32,
        dr_flag: r.dr_flag,
        rgb,
        laser,
        cloud,
    })
}

/// Decoded frames kept in memory, keyed by frame id.
#[derive(Clone, Debug, Default)]
pub struct FrameCache {
    pub modalities: Option<ModalitySet>,
    frames: HashMap<u64, LoadedFrame>,
}

impl FrameCache {
    pub fn load(root: &Path, records: &[FrameRecord], modalities: ModalitySet, opts: &LoadOptions) -> Result<Self> {
        let frames = records
            .iter()
            .map(|r| Ok((r.frame_id, load_frame(root, r, modalities, opts)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            modalities: Some(modalities),
            frames,
        })
    }

    pub fn get(&self, frame_id: u64) -> Option<&LoadedFrame> {
        self.frames.get(&frame_id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Model inputs and targets for a group of frames.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frame_ids: Vec<u64>,
    pub envs: Vec<Archetype>,
    pub input: ModelInput<f32>,
    /// `[B, 1]`.
    pub targets: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

fn rgb_tensor(frames: &[&LoadedFrame]) -> Result<Tensor<f32>> {
    let first = frames[0].rgb.as_ref().expect("rgb loaded");
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        let img = f.rgb.as_ref().expect("rgb loaded");
        if img.width != w || img.height != h {
            return Err(Error::shape("batch", "rgb sizes differ"));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0));
        }
    }
    Tensor::new(&[frames.len(), 3, h, w], data)
}

fn laser_tensor(frames: &[&LoadedFrame]) -> Result<Tensor<f32>> {
    let first = frames[0].laser.as_ref().expect("laser loaded");
    let (w, h) = (first.width, first.height);
    let data = frames
        .iter()
        .flat_map(|f| f.laser.as_ref().expect("laser loaded").pixels.iter().map(|&p| f32::from(p)))
        .collect();
    Tensor::new(&[frames.len(), 1, h, w], data)
}

/// Stacks cached frames into a batch with the requested modalities.
pub fn make_batch(cache: &FrameCache, ids: &[u64], modalities: ModalitySet) -> Result<Batch> {
    let frames = ids
        .iter()
        .map(|id| {
            cache
                .get(*id)
                .ok_or_else(|| Error::Config(format!("frame {id} not loaded")))
        })
        .collect::<Result<Vec<_>>>()?;
    let need = |ok: bool, name: &'static str| if ok { Ok(()) } else { Err(Error::MissingModality(name)) };
    let input = ModelInput {
        rgb: if modalities.rgb {
            need(frames.iter().all(|f| f.rgb.is_some()), "rgb")?;
            Some(rgb_tensor(&frames)?)
        } else {
            None
        },
        laser: if modalities.laser {
            need(frames.iter().all(|f| f.laser.is_some()), "laser")?;
            Some(laser_tensor(&frames)?)
        } else {
            None
        },
        cloud: if modalities.cloud {
            need(frames.iter().all(|f| f.cloud.is_some()), "cloud")?;
            let clouds: Vec<&PointCloud> = frames.iter().map(|f| f.cloud.as_ref().unwrap()).collect();
            Some(clouds_to_tensor(&clouds)?)
        } else {
            None
        },
    };
    Ok(Batch {
        frame_ids: ids.to_vec(),
        envs: frames.iter().map(|f| f.env).collect(),
        input,
        targets: Tensor::new(&[ids.len(), 1], frames.iter().map(|f| f.steering).collect())?,
    })
}

/// Frame ids of one epoch, shuffled by `seed` and cut into batches; the
/// last batch may be short.
pub fn batch_ids(records: &[FrameRecord], batch_size: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut ids: Vec<u64> = records.iter().map(|r| r.frame_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids.chunks(batch_size).map(<[u64]>::to_vec).collect())
}

/// One shuffled pass over `records` as batches built from `cache`.
pub fn batches<'a>(
    cache: &'a FrameCache,
    records: &[FrameRecord],
    batch_size: usize,
    seed: u64,
    modalities: ModalitySet,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let ids = batch_ids(records, batch_size, seed)?;
    Ok(ids.into_iter().map(move |chunk| make_batch(cache, &chunk, modalities)))
}
