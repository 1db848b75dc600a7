//! Model checkpointing in the shared binary container (section `MODL`).
//!
//! Checkpoints hold the network parameters plus enough metadata to rebuild
//! the schedule and architecture; optimizer moments are not stored because
//! fine-tuning always restarts them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, NoiseSchedule, ProvenanceEntry, ScheduleConfig};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::nn::{AdamW, CondUnet, NetworkSpec, Parameterized};
use crate::rng::substream;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    network_spec: NetworkSpec,
    schedule: ScheduleConfig,
    cond_width: usize,
    image_size: usize,
    step_count: u64,
    provenance: Vec<ProvenanceEntry>,
}

pub fn save_checkpoint(state: &mut ModelState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        network_spec: state.net.spec.clone(),
        schedule: state.schedule.config,
        cond_width: state.net.cond_width,
        image_size: state.image_size,
        step_count: state.step_count,
        provenance: state.provenance.clone(),
    };
    let mut tensors = Vec::new();
    state.net.visit_params(&mut |p| {
        tensors.push((p.name.clone(), p.shape.clone(), p.data.to_vec()));
    });
    write_container(
        path,
        *b"MODL",
        serde_json::to_value(&meta).expect("meta serializes"),
        &tensors,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let container = read_container(path)?;
    if &container.section != b"MODL" {
        return Err(Error::Format(format!(
            "{}: expected MODL section, found {:?}",
            path.display(),
            String::from_utf8_lossy(&container.section)
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
    let schedule = NoiseSchedule::from_config(&meta.schedule)?;
    let mut init_rng = substream(0, "checkpoint.load", 0);
    let mut net = CondUnet::new(meta.network_spec, meta.cond_width, &mut init_rng);

    let mut missing = Vec::new();
    let mut loaded = 0usize;
    net.visit_params(&mut |p| match container.tensor(&p.name) {
        Some((entry, data)) => {
            if entry.shape != p.shape || data.len() != p.data.len() {
                missing.push(format!(
                    "{} (shape {:?} != {:?})",
                    p.name, entry.shape, p.shape
                ));
            } else {
                p.data.copy_from_slice(data);
                loaded += 1;
            }
        }
        None => missing.push(p.name.clone()),
    });
    if !missing.is_empty() {
        return Err(Error::Compatibility(format!(
            "checkpoint {} incompatible with architecture: {:?}",
            path.display(),
            missing
        )));
    }
    if loaded != container.tensors.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint {} has {} tensors, architecture uses {loaded}",
            path.display(),
            container.tensors.len()
        )));
    }

    Ok(ModelState {
        net,
        opt: AdamW::new(1e-4, 0.9, 0.99, 0.0),
        schedule,
        image_size: meta.image_size,
        step_count: meta.step_count,
        rng: substream(0, "checkpoint.rng", 0),
        provenance: meta.provenance,
    })
}
