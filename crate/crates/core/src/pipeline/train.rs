use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule, ParamGroup, ParamSet, Tensor};

/// Weight decay applies to matrix weights only, never to biases, norms, or
/// embedding tables.
pub(crate) fn decays(name: &str, t: &Tensor) -> bool {
    t.ndim() >= 2 && name.ends_with(".weight")
}

/// Optimizer driver shared by the training loops.
pub(crate) struct Optimizer {
    state: AdamState,
    groups: Vec<ParamGroup>,
    schedule: Option<LrSchedule>,
    adam: AdamConfig,
    clip: Option<f64>,
}

impl Optimizer {
    pub fn new(
        params: &ParamSet,
        schedule: Option<LrSchedule>,
        adam: AdamConfig,
        clip: Option<f64>,
        lr_scale: impl Fn(&str) -> f64,
        frozen: impl Fn(&str) -> bool,
    ) -> Self {
        let groups = params
            .iter()
            .map(|(name, t)| ParamGroup {
                lr_scale: lr_scale(name),
                decay: decays(name, t),
                frozen: frozen(name),
            })
            .collect();
        Optimizer {
            state: AdamState::new(params.tensors()),
            groups,
            schedule,
            adam,
            clip,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.schedule.as_ref().map_or(0.0, |s| s.lr_at(step))
    }

    /// Clips, then applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<Tensor>, step: usize) -> Result<f64> {
        let norm = match self.clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt(),
        };
        let lr = self.lr_at(step);
        adam_step(params.tensors_mut(), &grads, &mut self.state, lr, &self.adam, &self.groups).map_err(|e| {
            Error::Diverged {
                step,
                what: e.to_string(),
            }
        })?;
        Ok(norm)
    }
}

/// Schedule for `total` steps, shortening the warmup when the run is tiny.
pub(crate) fn schedule_for(peak: f64, min: f64, warmup: usize, total: usize) -> Result<Option<LrSchedule>> {
    if total == 0 {
        return Ok(None);
    }
    LrSchedule::new(peak, min.min(peak), warmup.min(total - 1), total).map(Some)
}

pub(crate) fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: format!("{what} = {v}"),
        })
    }
}
