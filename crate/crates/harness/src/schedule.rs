use crate::config::{Decay, ScheduleConfig};

/// Linear ramp `lr·(iter+1)/warmup` during warmup, then `lr` halved once
/// per passed milestone.
pub fn warmup_lr(iter: usize, base_lr: f64, schedule: &ScheduleConfig) -> f64 {
    if iter < schedule.warmup_iters {
        return base_lr * (iter + 1) as f64 / schedule.warmup_iters as f64;
    }
    match &schedule.decay {
        Decay::Constant => base_lr,
        Decay::HalfAt(milestones) => {
            let halvings = milestones.iter().filter(|&&m| iter >= m).count();
            base_lr * 0.5f64.powi(halvings as i32)
        }
    }
}
