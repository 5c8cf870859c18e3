//! Optimizer loop: batches in, checkpoints and a loss log out.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use covernet::batch::{channel_mean, BatchPlan};
use covernet::checkpoint::{save_weights, StoreMeta, WeightStore};
use covernet::data::read_split;
use covernet::net::{
    params_from_store, params_into_store, train_step, Optimizer, Params,
};

use crate::config::RunConfig;
use crate::error::{io_ctx, require_dir, require_file, CliError, CliResult};

use super::common::{load_store, stored_mean};

pub const LOSS_LOG: &str = "loss_log.csv";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.bkwt")
}

/// State carried between checkpoints.
struct Run {
    spec: covernet::net::NetworkSpec,
    params: Params<f32>,
    opt: Optimizer<f32>,
    mean: Option<[f32; 3]>,
    class_count: u64,
}

impl Run {
    fn write_checkpoint(&self, config: &RunConfig, dir: &Path) -> CliResult<PathBuf> {
        let mut store = WeightStore::new();
        params_into_store(&self.params, &mut store);
        self.opt.save_into(&mut store);
        store.set_meta(&StoreMeta {
            iteration: self.opt.steps_done,
            seed: config.seed,
            schedule_pos: self.opt.steps_done,
            model_code: config.model.code(),
            class_count: self.class_count,
            flags: config.flags(),
        });
        if let Some(mean) = self.mean {
            store.set_channel_mean(mean);
        }
        let path = dir.join(checkpoint_name(self.opt.steps_done));
        std::fs::write(&path, save_weights(&store)).map_err(io_ctx(&path))?;
        Ok(path)
    }
}

pub fn run(config: &RunConfig, resume: Option<&Path>) -> CliResult<()> {
    require_dir(&config.split_dir)?;
    require_dir(&config.image_root)?;
    if let Some(path) = resume {
        require_file(path)?;
    }

    let (split, labels) = read_split(&config.split_dir)?;
    let spec = config.network();
    if labels.class_count() != spec.class_count {
        return Err(CliError::Conflict(format!(
            "split has {} classes but the network head emits {}",
            labels.class_count(),
            spec.class_count
        )));
    }
    let [height, width, _] = spec.input_shape;

    let mut run = match resume {
        Some(path) => {
            let store = load_store(path)?;
            let meta = store.meta()?;
            if meta.model_code != config.model.code() {
                return Err(CliError::Conflict(format!(
                    "checkpoint holds model code {} but the config says {}",
                    meta.model_code,
                    config.model.name()
                )));
            }
            if meta.flags != config.flags() {
                return Err(CliError::Conflict(format!(
                    "checkpoint flags {:#x} do not match the config's {:#x}",
                    meta.flags,
                    config.flags()
                )));
            }
            if meta.seed != config.seed {
                return Err(CliError::Conflict(format!(
                    "checkpoint was trained with seed {} but the config says {}; \
                     resuming would not reproduce the uninterrupted run",
                    meta.seed, config.seed
                )));
            }
            if meta.class_count as usize != spec.class_count {
                return Err(CliError::Conflict(format!(
                    "checkpoint head emits {} classes but the network declares {}",
                    meta.class_count, spec.class_count
                )));
            }
            let params: Params<f32> = params_from_store(&spec, &store)?;
            let opt = Optimizer::load_from(&store, config.method(), config.schedule(), &params)?;
            if opt.steps_done != meta.iteration {
                return Err(CliError::Conflict(format!(
                    "checkpoint iteration {} disagrees with optimizer step count {}",
                    meta.iteration, opt.steps_done
                )));
            }
            let mean = stored_mean(&store, &meta)?;
            Run {
                spec,
                params,
                opt,
                mean,
                class_count: meta.class_count,
            }
        }
        None => {
            let params: Params<f32> = spec.init_params(config.seed)?;
            let opt = Optimizer::new(config.method(), config.schedule(), &params);
            let mean = if config.mean_subtract {
                let (mean, skipped) =
                    channel_mean(&split.train, &config.image_root, height, width)?;
                for (id, err) in &skipped {
                    eprintln!("mean pass skipping {id}: {err}");
                }
                Some(mean)
            } else {
                None
            };
            Run {
                spec,
                params,
                opt,
                mean,
                class_count: labels.class_count() as u64,
            }
        }
    };
    config.schedule().validate().map_err(|e| CliError::Arg(e.to_string()))?;

    if run.opt.steps_done >= config.iterations {
        println!(
            "checkpoint already at iteration {}, nothing to do",
            run.opt.steps_done
        );
        return Ok(());
    }

    std::fs::create_dir_all(&config.checkpoint_dir).map_err(io_ctx(&config.checkpoint_dir))?;
    config
        .write_resolved(&config.checkpoint_dir)
        .map_err(io_ctx(&config.checkpoint_dir))?;

    let plan = BatchPlan::new(
        &split.train,
        &labels,
        &config.image_root,
        height,
        width,
        config.batch_size,
        config.seed,
    )?
    .with_mean(run.mean);

    let log_path = config.checkpoint_dir.join(LOSS_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_ctx(&log_path))?;
    let log_is_fresh = log.metadata().map(|m| m.len() == 0).unwrap_or(true);
    if log_is_fresh {
        writeln!(log, "iteration,loss,lr").map_err(io_ctx(&log_path))?;
    }

    while run.opt.steps_done < config.iterations {
        let step = run.opt.steps_done;
        let (epoch, index) = plan.locate(step);
        let batch = plan.load_batch(epoch, index)?;
        for (id, err) in &batch.skipped {
            eprintln!("iteration {step} skipping {id}: {err}");
        }
        let lr = run.opt.schedule.lr_at(step);
        let loss = train_step(
            &run.spec,
            &mut run.params,
            &mut run.opt,
            config.seed,
            &batch.images,
            &batch.labels,
        )?;
        if !loss.is_finite() {
            return Err(CliError::Numerical(format!(
                "loss became non-finite at iteration {step}"
            )));
        }
        writeln!(log, "{step},{loss},{lr}").map_err(io_ctx(&log_path))?;

        let done = run.opt.steps_done;
        if done % config.checkpoint_every == 0 || done == config.iterations {
            log.flush().map_err(io_ctx(&log_path))?;
            let path = run.write_checkpoint(config, &config.checkpoint_dir)?;
            println!("iteration {done}: loss {loss:.6}, checkpoint {}", path.display());
        }
    }
    log.flush().map_err(io_ctx(&log_path))?;
    println!("training finished at iteration {}", run.opt.steps_done);
    Ok(())
}
