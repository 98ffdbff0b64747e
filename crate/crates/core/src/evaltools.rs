//! Per-environment RMSE, the modality ablation table and Grad-CAM maps.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::dataset::{make_batch, FrameCache, FrameRecord};
use crate::error::{Error, Result};
use crate::nmfnet::{InputVars, ModalitySet, Model, ModelInput};
use crate::pnm::Image;
use crate::simworld::Archetype;
use crate::tensor::{Graph, Mode};
use crate::trainer::{train_with, EpochReport, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub modalities: ModalitySet,
    pub records: usize,
    /// In `Archetype::ALL` order; `None` when the split has no record of that env.
    pub per_env: Vec<(Archetype, Option<f64>)>,
    /// Mean of the available per-env values.
    pub average: Option<f64>,
    pub warnings: Vec<String>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn env(&self, env: Archetype) -> Option<f64> {
        self.per_env.iter().find(|(e, _)| *e == env).and_then(|(_, v)| *v)
    }

    pub const TSV_HEADER: &'static str = "model\tmodalities\trecords\thouse\tcity\tcave\taverage";

    pub fn tsv_row(&self) -> String {
        let envs: Vec<String> = Archetype::ALL.iter().map(|&e| cell(self.env(e))).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.model_id,
            self.modalities,
            self.records,
            envs.join("\t"),
            cell(self.average)
        )
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_row())
    }
}

/// Short stable identifier of a model's weights (FNV-1a over the checkpoint bytes).
pub fn model_fingerprint(model: &Model) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in model.encode() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Eval-mode predictions for `records`, in record order.
pub fn predict_records(model: &Model, cache: &FrameCache, records: &[FrameRecord], batch_size: usize) -> Result<Vec<f32>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let ids: Vec<u64> = records.iter().map(|r| r.frame_id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size) {
        let batch = make_batch(cache, chunk, model.modalities())?;
        out.extend(model.predict(&batch.input)?);
    }
    Ok(out)
}

/// `sqrt(mean((y − ŷ)²))` per environment, accumulated in f64.
pub fn rmse(model: &Model, cache: &FrameCache, records: &[FrameRecord], batch_size: usize) -> Result<EvalReport> {
    let preds = predict_records(model, cache, records, batch_size)?;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (r, &p) in records.iter().zip(&preds) {
        let i = r.env as usize;
        let e = r.steering - f64::from(p);
        sums[i] += e * e;
        counts[i] += 1;
    }
    let mut warnings = Vec::new();
    let per_env: Vec<(Archetype, Option<f64>)> = Archetype::ALL
        .iter()
        .map(|&e| {
            let i = e as usize;
            if counts[i] == 0 {
                warnings.push(format!("no test records for {e}; excluded from the average"));
                (e, None)
            } else {
                (e, Some((sums[i] / counts[i] as f64).sqrt()))
            }
        })
        .collect();
    let present: Vec<f64> = per_env.iter().filter_map(|(_, v)| *v).collect();
    let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(EvalReport {
        model_id: model_fingerprint(model),
        modalities: model.modalities(),
        records: records.len(),
        per_env,
        average,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationOutcome {
    Report(EvalReport),
    NoConverge { step: usize, loss: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub modalities: ModalitySet,
    pub params: usize,
    pub outcome: AblationOutcome,
}

impl AblationRow {
    pub fn average(&self) -> Option<f64> {
        match &self.outcome {
            AblationOutcome::Report(r) => r.average,
            AblationOutcome::NoConverge { .. } => None,
        }
    }
}

pub const ABLATION_HEADER: &str = "variant\tmodalities\tparams\thouse\tcity\tcave\taverage\tstatus";

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        let (envs, avg, status) = match &row.outcome {
            AblationOutcome::Report(r) => (
                Archetype::ALL.iter().map(|&e| cell(r.env(e))).collect::<Vec<_>>(),
                cell(r.average),
                "ok".to_string(),
            ),
            AblationOutcome::NoConverge { .. } => (vec!["-".to_string(); 3], "-".to_string(), "no-converge".to_string()),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            row.modalities.label(),
            row.modalities,
            row.params,
            envs.join("\t"),
            avg,
            status
        );
    }
    out
}

/// Trains and evaluates every modality subset with the same seed and
/// schedule. `cache` must hold all three modalities.
pub fn ablation_suite(
    cache: &FrameCache,
    train: &[FrameRecord],
    test: &[FrameRecord],
    cfg: &TrainConfig,
    mut observer: impl FnMut(ModalitySet, EpochReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(7);
    for modalities in ModalitySet::ablation_rows() {
        let row_cfg = TrainConfig {
            modalities,
            checkpoint: None,
            loss_log: None,
            ..cfg.clone()
        };
        let params = Model::new(&row_cfg.net_config(), row_cfg.seed)?.params.trainable_count();
        let outcome = match train_with(cache, train, &row_cfg, |e| observer(modalities, e)) {
            Ok(state) => {
                let report = rmse(&state.model, cache, test, row_cfg.batch_size)?;
                match report.average {
                    Some(a) if !a.is_finite() => AblationOutcome::NoConverge {
                        step: state.step,
                        loss: a,
                    },
                    _ => AblationOutcome::Report(report),
                }
            }
            Err(Error::Divergence { step, loss }) => AblationOutcome::NoConverge { step, loss },
            Err(e) => return Err(e),
        };
        rows.push(AblationRow {
            modalities,
            params,
            outcome,
        });
    }
    Ok(rows)
}

/// Convolutional branch whose last feature map Grad-CAM explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamBranch {
    Rgb,
    Laser,
}

impl fmt::Display for CamBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CamBranch::Rgb => "rgb",
            CamBranch::Laser => "laser",
        })
    }
}

impl FromStr for CamBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(CamBranch::Rgb),
            "laser" => Ok(CamBranch::Laser),
            _ => Err(Error::Config(format!("unknown cam branch {s:?} (expected rgb or laser)"))),
        }
    }
}

/// Unnormalized map `ReLU(Σ_c w_c·A_c)` at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCam {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Heatmap in `[0, 1]` at the branch input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Grad-CAM of the steering output with respect to the last activation map
/// of `branch`, for a single-frame input. Computed in f64, eval mode.
pub fn grad_cam_raw(model: &Model, input: &ModelInput<f32>, branch: CamBranch) -> Result<RawCam> {
    let present = match branch {
        CamBranch::Rgb => model.net.rgb.is_some(),
        CamBranch::Laser => model.net.laser.is_some(),
    };
    if !present {
        return Err(Error::Config(format!("model has no {branch} branch")));
    }
    if input.batch_size() != 1 {
        return Err(Error::Config(format!("grad-cam takes one frame, got {}", input.batch_size())));
    }
    let params = model.params.cast::<f64>();
    let mut g = Graph::<f64>::new();
    let vars = InputVars::bind(&mut g, &input.cast());
    let out = model.net.forward(&params, &mut g, vars, Mode::Eval)?;
    let feature_map = match branch {
        CamBranch::Rgb => out.rgb,
        CamBranch::Laser => out.laser,
    }
    .expect("branch present")
    .map;
    let target = g.sum(out.steering);
    g.backward(target)?;
    let shape = g.shape(feature_map).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let a = g.value(feature_map).data();
    let zeros = vec![0.0; a.len()];
    let grad = g.grad(feature_map).unwrap_or(&zeros);
    let hw = h * w;
    let weights: Vec<f64> = (0..c).map(|k| grad[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let values = (0..hw)
        .map(|p| {
            let s: f64 = (0..c).map(|k| weights[k] * a[k * hw + p]).sum();
            s.max(0.0)
        })
        .collect();
    Ok(RawCam {
        height: h,
        width: w,
        values,
    })
}

/// Min-max normalizes (all zeros when the map is constant) and bilinearly
/// upsamples to `height × width` with half-pixel centers.
pub fn normalize_and_upsample(raw: &RawCam, height: usize, width: usize) -> CamMap {
    let lo = raw.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = if span > 1e-12 * hi.abs().max(1.0) {
        raw.values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; raw.values.len()]
    };
    let coord = |dst: usize, out: usize, inp: usize| {
        let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, raw.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, raw.width);
            let at = |r: usize, c: usize| norm[r * raw.width + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            values.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
        }
    }
    CamMap { height, width, values }
}

pub fn grad_cam(model: &Model, input: &ModelInput<f32>, branch: CamBranch) -> Result<CamMap> {
    let raw = grad_cam_raw(model, input, branch)?;
    let t = match branch {
        CamBranch::Rgb => input.rgb.as_ref(),
        CamBranch::Laser => input.laser.as_ref(),
    }
    .ok_or(Error::MissingModality(match branch {
        CamBranch::Rgb => "rgb",
        CamBranch::Laser => "laser",
    }))?;
    Ok(normalize_and_upsample(&raw, t.shape()[2], t.shape()[3]))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl CamMap {
    /// Grayscale PGM, 255 = 1.0.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.values.iter().map(|&v| to_u8(f64::from(v))).collect(),
        }
    }

    /// Blends a jet-style colouring of the map over `base` (gray or RGB, same size).
    pub fn overlay(&self, base: &Image) -> Result<Image> {
        if base.width != self.width || base.height != self.height {
            return Err(Error::shape("overlay", "base image size differs from the map"));
        }
        let mut out = Image::new(self.width, self.height, 3);
        for (i, &v) in self.values.iter().enumerate() {
            let v = f64::from(v);
            let heat = [4.0 * v - 3.0, 4.0 * v - 2.0, 4.0 * v - 1.0].map(|d: f64| (1.5 - d.abs()).clamp(0.0, 1.0));
            for ch in 0..3 {
                let b = f64::from(base.data[i * base.channels + ch.min(base.channels - 1)]) / 255.0;
                out.data[i * 3 + ch] = to_u8(0.5 * b + 0.5 * heat[ch]);
            }
        }
        Ok(out)
    }
}

/// The branch input of a single-frame batch as an 8-bit image.
pub fn branch_image(input: &ModelInput<f32>, branch: CamBranch) -> Result<Image> {
    let t = match branch {
        CamBranch::Rgb => input.rgb.as_ref().ok_or(Error::MissingModality("rgb"))?,
        CamBranch::Laser => input.laser.as_ref().ok_or(Error::MissingModality("laser"))?,
    };
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut img = Image::new(w, h, c);
    let d = t.data();
    for k in 0..c {
        for p in 0..h * w {
            img.data[p * c + k] = to_u8(f64::from(d[k * h * w + p]));
        }
    }
    Ok(img)
}
