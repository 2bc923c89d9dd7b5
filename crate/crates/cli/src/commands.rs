use std::path::{Path, PathBuf};
use std::sync::Arc;

use roireg::engine::{RunOptions, Session, TraceEntry};
use roireg::phantom::{generate_pair, PhantomPair, PhantomSpec, LESION_ROI_MARGIN};
use roireg::volume::{extract_slice, load_volume, rmse, save_volume, window_level, VolumeFormat};
use roireg::{DisplacementField, Error, GradientShareReport, RegionPartition, RoiBox, Volume3};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{create_dir, write_file, CliError, CompareArgs, DiagnoseArgs, PhantomArgs, RegisterArgs, SliceArgs, Stage};

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_pair(fixed: &Path, moving: &Path) -> roireg::Result<(Volume3, Volume3)> {
    let f = load_volume(fixed, VolumeFormat::Mhd)?;
    let m = load_volume(moving, VolumeFormat::Mhd)?;
    f.dims().ensure_same(&m.dims())?;
    Ok((f, m))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    /// Box around the lesion, for use with `--roi`.
    pub lesion_roi: RoiBox,
}

pub fn load_phantom_spec(path: Option<&Path>, seed: Option<u64>) -> roireg::Result<PhantomSpec> {
    let mut spec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::argument("spec", format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(seed) = seed {
        spec.rng_seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

/// Writes `fixed.mhd`, `moving.mhd`, `gt_dvf.mhd` (with `.raw` payloads) and `phantom.json`.
pub fn cmd_phantom(args: &PhantomArgs) -> Result<PhantomPair, CliError> {
    let spec = load_phantom_spec(args.spec.as_deref(), args.seed).stage("phantom spec")?;
    let pair = generate_pair(&spec).stage("phantom")?;
    let out = &args.out;
    (|| {
        create_dir(out)?;
        save_volume(&pair.fixed, out.join("fixed.mhd"), VolumeFormat::Mhd)?;
        save_volume(&pair.moving, out.join("moving.mhd"), VolumeFormat::Mhd)?;
        pair.gt_dvf.save(out.join("gt_dvf.mhd"))?;
        let manifest = PhantomManifest {
            lesion_roi: spec.lesion_roi(LESION_ROI_MARGIN),
            spec: spec.clone(),
        };
        write_file(&out.join("phantom.json"), to_json(&manifest))
    })()
    .stage("write")?;
    Ok(pair)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseStages {
    /// Before any registration (fixed vs moving).
    pub unregistered: f64,
    pub after_init: f64,
    pub after_iso: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMetrics {
    pub roi: RoiBox,
    pub rmse_hu: RmseStages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterMetrics {
    pub seed: u64,
    pub iterations: u64,
    pub full_rmse_hu: RmseStages,
    pub rois: Vec<RoiMetrics>,
}

fn rmse_all(fixed: &Volume3, v: &Volume3, rois: &[RoiBox]) -> roireg::Result<(f64, Vec<f64>)> {
    let full = rmse(fixed, v, None)?;
    let per = rois.iter().map(|r| rmse(fixed, v, Some(r))).collect::<roireg::Result<_>>()?;
    Ok((full, per))
}

/// Init, ISO, then one RSO round per box. Writes `dvf.mhd`, `warped.mhd`,
/// `trace.csv`, `trace.json`, `metrics.json` and `session.json`.
pub fn cmd_register(args: &RegisterArgs) -> Result<RegisterMetrics, CliError> {
    let mut cfg = RunConfig::resolve(&args.run).stage("config")?;
    if let Some(n) = args.iso_iters {
        cfg.iso_iters = n;
    }
    if let Some(n) = args.rso_iters {
        cfg.rso_iters = n;
    }
    let (fixed, moving) = load_pair(&args.fixed, &args.moving).stage("load")?;
    for roi in &args.rois {
        roi.validate(fixed.dims()).stage("roi")?;
    }
    let rois = &args.rois;
    let unregistered = rmse_all(&fixed, &moving, rois).stage("metrics")?;
    let mut session = Session::new(
        Arc::new(fixed),
        Arc::new(moving),
        cfg.session_config(rois.first().copied()),
    )
    .stage("init")?;
    let fixed = session.fixed().clone();
    let after_init = rmse_all(&fixed, &session.warped(), rois).stage("metrics")?;
    session.run_iso(cfg.iso_iters).stage("iso")?;
    let after_iso = rmse_all(&fixed, &session.warped(), rois).stage("metrics")?;
    for roi in rois {
        session.run_rso(*roi, cfg.rso_iters).stage("rso")?;
    }
    let warped = session.warped();
    let done = rmse_all(&fixed, &warped, rois).stage("metrics")?;
    let metrics = RegisterMetrics {
        seed: cfg.seed,
        iterations: session.iteration(),
        full_rmse_hu: RmseStages {
            unregistered: unregistered.0,
            after_init: after_init.0,
            after_iso: after_iso.0,
            final_: done.0,
        },
        rois: rois
            .iter()
            .enumerate()
            .map(|(i, roi)| RoiMetrics {
                roi: *roi,
                rmse_hu: RmseStages {
                    unregistered: unregistered.1[i],
                    after_init: after_init.1[i],
                    after_iso: after_iso.1[i],
                    final_: done.1[i],
                },
            })
            .collect(),
    };
    let out = &args.out;
    (|| {
        create_dir(out)?;
        session.dvf().save(out.join("dvf.mhd"))?;
        save_volume(&warped, out.join("warped.mhd"), VolumeFormat::Mhd)?;
        write_file(&out.join("trace.csv"), session.export_trace_csv())?;
        write_file(&out.join("trace.json"), session.export_trace_json())?;
        write_file(&out.join("metrics.json"), to_json(&metrics))?;
        write_file(&out.join("session.json"), to_json(&session.summary()))
    })()
    .stage("write")?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub iso_iters: usize,
    pub rso_iters: usize,
    pub roi_rmse_hu: f64,
    pub full_rmse_hu: f64,
    pub trace_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub roi: RoiBox,
    pub seed: u64,
    /// At the shared starting field.
    pub initial_roi_rmse_hu: f64,
    pub initial_full_rmse_hu: f64,
    /// ISO-only arm, measured after as many ISO iterations as the combo arm runs.
    pub iso_only_roi_rmse_hu_at_split: Option<f64>,
    pub iso_only: ArmReport,
    pub combo: ArmReport,
    /// `combo / iso_only` ROI RMSE; absent when the ISO-only RMSE is ~0.
    pub roi_rmse_ratio: Option<f64>,
    pub ratio_undefined: bool,
}

pub struct Comparison {
    pub iso_only: Session,
    pub combo: Session,
    pub report: CompareReport,
}

const RATIO_FLOOR_HU: f64 = 1e-6;

/// Both arms start from one initialization: ISO for `iso_only` iterations
/// versus ISO for `combo.0` then RSO on `roi` for `combo.1`.
pub fn compare_arms(
    fixed: Arc<Volume3>,
    moving: Arc<Volume3>,
    roi: RoiBox,
    cfg: &RunConfig,
    iso_only: usize,
    combo: (usize, usize),
) -> Result<Comparison, CliError> {
    cfg.validate().stage("config")?;
    fixed.dims().ensure_same(&moving.dims()).stage("load")?;
    roi.validate(fixed.dims()).stage("roi")?;
    let start = Session::new(fixed.clone(), moving, cfg.session_config(Some(roi))).stage("init")?;
    let initial = start.warped();
    let initial_roi = rmse(&fixed, &initial, Some(&roi)).stage("metrics")?;
    let initial_full = rmse(&fixed, &initial, None).stage("metrics")?;

    let mut b = Session::restore(start.parts()).stage("init")?;
    let mut a = start;
    let split = combo.0 as u64;
    let mut at_split = None;
    let mut probe = |s: &Session, e: &TraceEntry| {
        if e.iteration == split {
            at_split = Some(rmse(&fixed, &s.warped(), Some(&roi)));
        }
    };
    a.run_iso_with(RunOptions::iterations(iso_only), &mut probe).stage("iso")?;
    let at_split = at_split.transpose().stage("metrics")?;
    b.run_iso(combo.0).stage("iso")?;
    b.run_rso(roi, combo.1).stage("rso")?;

    let arm = |s: &Session, iso: usize, rso: usize| -> roireg::Result<ArmReport> {
        let w = s.warped();
        Ok(ArmReport {
            iso_iters: iso,
            rso_iters: rso,
            roi_rmse_hu: rmse(&fixed, &w, Some(&roi))?,
            full_rmse_hu: rmse(&fixed, &w, None)?,
            trace_rows: s.trace().len(),
        })
    };
    let ra = arm(&a, iso_only, 0).stage("metrics")?;
    let rb = arm(&b, combo.0, combo.1).stage("metrics")?;
    let ratio = (ra.roi_rmse_hu > RATIO_FLOOR_HU).then(|| rb.roi_rmse_hu / ra.roi_rmse_hu);
    let report = CompareReport {
        roi,
        seed: cfg.seed,
        initial_roi_rmse_hu: initial_roi,
        initial_full_rmse_hu: initial_full,
        iso_only_roi_rmse_hu_at_split: at_split,
        iso_only: ra,
        combo: rb,
        roi_rmse_ratio: ratio,
        ratio_undefined: ratio.is_none(),
    };
    Ok(Comparison {
        iso_only: a,
        combo: b,
        report,
    })
}

/// Writes `compare.json`, `iso_only_trace.csv` and `combo_trace.csv`.
pub fn cmd_compare(args: &CompareArgs) -> Result<CompareReport, CliError> {
    let cfg = RunConfig::resolve(&args.run).stage("config")?;
    let (fixed, moving) = load_pair(&args.fixed, &args.moving).stage("load")?;
    let cmp = compare_arms(Arc::new(fixed), Arc::new(moving), args.roi, &cfg, args.iso_only_iters, args.combo)?;
    let out = &args.out;
    (|| {
        create_dir(out)?;
        write_file(&out.join("iso_only_trace.csv"), cmp.iso_only.export_trace_csv())?;
        write_file(&out.join("combo_trace.csv"), cmp.combo.export_trace_csv())?;
        write_file(&out.join("compare.json"), to_json(&cmp.report))
    })()
    .stage("write")?;
    Ok(cmp.report)
}

/// Gradient share per block of the unregularized full-image loss at the given field.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<GradientShareReport, CliError> {
    let (fixed, moving) = load_pair(&args.fixed, &args.moving).stage("load")?;
    let partition = RegionPartition::blocks(fixed.dims(), args.blocks).stage("blocks")?;
    let dvf = match &args.dvf {
        Some(p) => DisplacementField::load(p).stage("load")?,
        None => DisplacementField::zeros(fixed.dims()),
    };
    dvf.dims().ensure_same(&fixed.dims()).stage("load")?;
    let report = roireg::loss::gradient_share(&fixed, &moving, &dvf, &partition, &roireg::LossConfig::unregularized())
        .stage("diagnose")?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent).stage("write")?;
        }
        write_file(out, to_json(&report)).stage("write")?;
    }
    Ok(report)
}

pub fn cmd_slice(args: &SliceArgs) -> Result<(), CliError> {
    let (lo, hi) = args.window;
    if !(lo < hi) {
        return Err(Error::argument("window", format!("lo {lo} must be below hi {hi}"))).stage("slice");
    }
    let mut v = load_volume(&args.volume, VolumeFormat::Mhd).stage("load")?;
    if let Some(p) = &args.subtract {
        let other = load_volume(p, VolumeFormat::Mhd).stage("load")?;
        v = v.difference(&other).stage("load")?;
    }
    let img = extract_slice(&v, args.axis, args.index).and_then(|s| window_level(&s, lo, hi)).stage("slice")?;
    write_png(&args.out, &img).stage("write")
}

pub fn write_png(path: &PathBuf, img: &roireg::volume::SliceImage) -> roireg::Result<()> {
    let gray = img.gray().ok_or_else(|| Error::argument("slice", "window the slice before export"))?;
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, gray.to_vec())
        .expect("pixel count matches slice size");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
