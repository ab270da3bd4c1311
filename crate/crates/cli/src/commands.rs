use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use deepbet_core::evaluate::{benchmark, calibrate_threshold, default_threshold_grid, dice};
use deepbet_core::nifti::{write_nifti, Encoding};
use deepbet_core::phantom::{generate, PhantomSpec};
use deepbet_core::train::data::prepare_subjects;
use deepbet_core::train::train_models;
use deepbet_core::{BinaryMask, DiceReport, Extractor, ToolConfig, Volume, WeightSet};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::files::{list_nifti, read, subject_id, training_pairs};
use crate::{BenchArgs, Cli, Command, EvalArgs, ExtractArgs, PhantomArgs, TrainArgs};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Extract(a) => {
            let mut cfg = g.tool_config(&[])?;
            if let Some(t) = a.threshold {
                cfg.pipeline.binarize_threshold = t;
            }
            if let Some(m) = a.mode {
                cfg.pipeline.mode = m;
            }
            extract(a, &cfg)
        }
        Command::Train(a) => {
            let mut cfg = g.tool_config(&[])?;
            if let Some(m) = a.mode {
                cfg.pipeline.mode = m;
            }
            train(a, &cfg)
        }
        Command::Phantom(a) => phantom(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => {
            let mut cfg = g.tool_config(&[])?;
            if let Some(m) = a.mode {
                cfg.pipeline.mode = m;
            }
            bench(a, &cfg)
        }
    }
}

fn create_dir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))
}

fn create_parent(p: &Path) -> CliResult<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

fn write(v: &Volume, p: &Path, enc: Encoding) -> CliResult<()> {
    create_parent(p)?;
    write_nifti(v, p, enc).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn extractor(weights: &Path, cfg: &ToolConfig) -> CliResult<Extractor> {
    cfg.validate()?;
    let w = WeightSet::load(weights).map_err(|e| CliError::Data(format!("{}: {e}", weights.display())))?;
    Ok(Extractor::new(&w, cfg.pipeline.clone(), cfg.preprocess.clone())?)
}

/// Keeps going after a per-item failure; reports the first one.
fn first_error(results: Vec<CliResult<()>>) -> CliResult<()> {
    let failed = results.iter().filter(|r| r.is_err()).count();
    match results.into_iter().find_map(Result::err) {
        Some(e) if failed > 1 => {
            eprintln!("deepbet: {failed} items failed");
            Err(e)
        }
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn extract(a: &ExtractArgs, cfg: &ToolConfig) -> CliResult<()> {
    let ex = extractor(&a.weights, cfg)?;
    let jobs: Vec<(PathBuf, PathBuf, Option<PathBuf>)> = if a.input.is_dir() {
        list_nifti(&a.input)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("listed file");
                let out = a.output.join(name);
                let mask = a.mask_out.as_ref().map(|m| m.join(name));
                (p, out, mask)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.output.clone(), a.mask_out.clone())]
    };
    let results = jobs
        .par_iter()
        .map(|(input, out, mask_out)| {
            let v = read(input)?;
            let e = ex
                .extract(&v)
                .map_err(|e| CliError::from(e).map(|m| format!("{}: {m}", input.display())))?;
            write(&e.masked, out, Encoding::float32())?;
            if let Some(m) = mask_out {
                write(&e.mask.to_volume(&v)?, m, Encoding::uint8())?;
            }
            eprintln!("{}: {} brain voxels", input.display(), e.mask.count());
            Ok(())
        })
        .collect();
    first_error(results)
}

fn train(a: &TrainArgs, cfg: &ToolConfig) -> CliResult<()> {
    cfg.validate()?;
    let pairs = training_pairs(&a.data)?;
    let volumes = pairs
        .par_iter()
        .map(|(_, img, mask)| Ok((read(img)?, read(mask)?)))
        .collect::<CliResult<Vec<_>>>()?;
    eprintln!("preprocessing {} subjects", volumes.len());
    let subjects = prepare_subjects(&volumes, &cfg.preprocess)?;
    drop(volumes);
    let (set, logs) = train_models(&subjects, cfg, |role, s| {
        eprintln!(
            "{role} epoch {} loss {:.4} ({} clipped steps)",
            s.epoch + 1,
            s.mean_loss,
            s.clipped_steps
        )
    })?;
    create_parent(&a.out)?;
    set.save(&a.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    if let Some(p) = &a.log {
        let mut csv = String::from("role,step,epoch,lr,loss\n");
        for (role, log) in &logs {
            for line in log.to_csv().lines().skip(1) {
                csv.push_str(&format!("{role},{line}\n"));
            }
        }
        create_parent(p)?;
        std::fs::write(p, csv).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn phantom(a: &PhantomArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let results = (0..a.count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = a.seed + i;
            let p = generate(&PhantomSpec::with_seed(seed, a.size))?;
            let id = format!("phantom_{seed:04}");
            write(&p.image, &a.out.join(format!("{id}_img.nii.gz")), Encoding::float32())?;
            write(&p.mask, &a.out.join(format!("{id}_mask.nii.gz")), Encoding::float32())
        })
        .collect();
    first_error(results)
}

fn by_id(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut m = BTreeMap::new();
    for p in list_nifti(dir)? {
        let id = subject_id(&p);
        if let Some(prev) = m.insert(id.clone(), p) {
            return Err(CliError::Data(format!("two files for subject {id} (one is {})", prev.display())));
        }
    }
    Ok(m)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let truth = by_id(&a.truth)?;
    let pred = by_id(&a.pred)?;
    if truth.is_empty() {
        return Err(CliError::Data(format!("no NIfTI files in {}", a.truth.display())));
    }
    let loaded = truth
        .par_iter()
        .map(|(id, t)| {
            let p = pred
                .get(id)
                .ok_or_else(|| CliError::Data(format!("no prediction for subject {id}")))?;
            let (gt, pm) = (read(t)?, read(p)?);
            if gt.dims() != pm.dims() {
                return Err(CliError::Data(format!(
                    "subject {id}: prediction {:?} vs truth {:?}",
                    pm.dims(),
                    gt.dims()
                )));
            }
            Ok((id.clone(), gt, BinaryMask::from_volume(&pm, 0.5)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let threshold = if a.calibrate {
        let gts: Vec<Volume> = loaded.iter().map(|(_, g, _)| g.clone()).collect();
        let preds: Vec<BinaryMask> = loaded.iter().map(|(_, _, p)| p.clone()).collect();
        calibrate_threshold(&gts, &preds, &default_threshold_grid())?
    } else {
        a.threshold
    };
    let samples = loaded
        .iter()
        .map(|(id, gt, p)| (id.clone(), dice(p, &BinaryMask::from_volume(gt, threshold as f32))))
        .collect();
    let report = DiceReport::new(samples, threshold);
    create_parent(&a.report)?;
    std::fs::write(&a.report, report.to_csv())
        .map_err(|e| CliError::Data(format!("{}: {e}", a.report.display())))?;
    println!(
        "median Dice {:.4} (min {:.4}, max {:.4}) over {} subjects, truth threshold {threshold}",
        report.median(),
        report.min(),
        report.max(),
        report.samples.len()
    );
    Ok(())
}

fn bench(a: &BenchArgs, cfg: &ToolConfig) -> CliResult<()> {
    let ex = extractor(&a.weights, cfg)?;
    let volumes = list_nifti(&a.input)?
        .par_iter()
        .map(|p| read(p))
        .collect::<CliResult<Vec<_>>>()?;
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let t = benchmark(|v| ex.extract(v), &volumes, a.reps)?;
    let reps: Vec<String> = t.per_repetition.iter().map(|r| format!("{r:.2}")).collect();
    println!("{:.2} images/minute (median of {} passes over {} images: {})", t.images_per_minute, a.reps, volumes.len(), reps.join(", "));
    println!("hardware: {}", t.hardware);
    Ok(())
}
