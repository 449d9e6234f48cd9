//! Inversion workers.

use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};

use bdinvert::image_io;
use bdinvert::inversion;
use bdinvert::pipeline::{self, RunManifest, RECONSTRUCTION_PNG};

use crate::jobs::JobState;
use crate::Shared;

pub const TARGET_PNG: &str = "target.png";

pub(crate) fn run(shared: Arc<Shared>, rx: Arc<Mutex<Receiver<String>>>) {
    loop {
        // hold the lock only while waiting, so jobs are taken in FIFO order
        let next = rx.lock().expect("queue lock").recv();
        let Ok(id) = next else { return };
        if let Err(e) = process(&shared, &id) {
            log::warn!("job {id} failed: {e}");
            let res = shared.jobs.lock().expect("jobs lock").update(&id, |j| {
                j.state = JobState::Failed;
                j.error = Some(e);
                j.finished_at = Some(pipeline::unix_now());
            });
            if let Err(e) = res {
                log::error!("could not record failure of job {id}: {e}");
            }
        }
    }
}

fn process(shared: &Shared, id: &str) -> Result<(), String> {
    let config = {
        let mut jobs = shared.jobs.lock().expect("jobs lock");
        let job = jobs.get(id).ok_or("job vanished from the table")?;
        if job.state != JobState::Queued {
            return Ok(());
        }
        let cfg = job.config.clone();
        jobs.update(id, |j| j.state = JobState::Running).map_err(|e| e.to_string())?;
        cfg
    };
    let assets = shared.assets.clone().ok_or_else(|| {
        format!(
            "checkpoints unavailable: {}",
            shared.assets_error.as_deref().unwrap_or("not loaded")
        )
    })?;
    let target = image_io::load_image(&shared.inputs_dir().join(format!("{id}.png"))).map_err(|e| e.to_string())?;
    let mut manifest = RunManifest::start("serve/invert", serde_json::to_value(&config).map_err(|e| e.to_string())?);
    manifest.seeds.insert("inversion".into(), config.seed);
    manifest.checkpoints = assets.checksums();

    let result = inversion::invert_with_progress(&target, &assets.models(), &config, |p| {
        let mut jobs = shared.jobs.lock().expect("jobs lock");
        let _ = jobs.update(id, |j| {
            j.progress.iteration = p.iteration;
            j.progress.total = p.total;
            j.progress.current_loss = Some(p.current_loss);
        });
    })
    .map_err(|e| e.to_string())?;

    let dir = shared.results_dir().join(id);
    let mut save = || -> bdinvert::Result<()> {
        result.save(&dir, &assets.generator)?;
        let rec = assets.generator.synthesize_from_base(&result.code, bdinvert::generator::NoiseMode::None)?;
        pipeline::write_atomic(&dir.join(RECONSTRUCTION_PNG), &image_io::encode_png(&rec)?)?;
        pipeline::write_atomic(&dir.join(TARGET_PNG), &image_io::encode_png(&target)?)?;
        manifest.finish(serde_json::to_value(result.final_metrics)?);
        manifest.write(&dir)?;
        Ok(())
    };
    save().map_err(|e| e.to_string())?;

    let mut jobs = shared.jobs.lock().expect("jobs lock");
    jobs.update(id, |j| {
        j.state = JobState::Done;
        j.result_ref = Some(format!("results/{id}"));
        j.final_metrics = Some(result.final_metrics);
        j.progress.iteration = j.progress.total;
        j.finished_at = Some(pipeline::unix_now());
    })
    .map_err(|e| e.to_string())
}
