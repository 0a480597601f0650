use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitive::Primitive;

/// Per-primitive statistics gathered between densification steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccumStats {
    /// Max of `α T` over every pixel of every view since the last reset.
    pub max_blend_weight: f64,
    /// Views where the primitive's max blend weight exceeded 1e-4.
    pub view_count: u32,
    /// Summed absolute screen-space center gradient (NDC units).
    pub abs_grad_accum: f64,
    pub max_screen_extent: f64,
    pub age_iters: u64,
}

impl AccumStats {
    /// Clears the accumulators but keeps the age.
    pub fn reset(&mut self) {
        *self = Self { age_iters: self.age_iters, ..Self::default() };
    }

    /// Accumulated gradient normalized by view count.
    pub fn mean_abs_grad(&self) -> f64 {
        if self.view_count == 0 {
            0.0
        } else {
            self.abs_grad_accum / f64::from(self.view_count)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub primitives: Vec<Primitive>,
    pub budget_max: usize,
    /// Stored frequency count `K` shared by every primitive.
    pub k: usize,
    pub k_active: usize,
    pub sh_degree_active: usize,
    pub stats: Vec<AccumStats>,
    pub dome_flags: Vec<bool>,
}

impl SceneModel {
    pub fn new(k: usize, budget_max: usize) -> Self {
        Self {
            primitives: Vec::new(),
            budget_max,
            k,
            k_active: 1,
            sh_degree_active: 0,
            stats: Vec::new(),
            dome_flags: Vec::new(),
        }
    }

    pub fn from_primitives(primitives: Vec<Primitive>, k_active: usize, budget_max: usize) -> Self {
        let k = primitives.first().map_or(k_active.max(1), |p| p.shape.frequencies());
        let n = primitives.len();
        Self {
            primitives,
            budget_max: budget_max.max(n),
            k,
            k_active: k_active.clamp(1, k),
            sh_degree_active: 0,
            stats: vec![AccumStats::default(); n],
            dome_flags: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn push(&mut self, p: Primitive, dome: bool) {
        self.primitives.push(p);
        self.stats.push(AccumStats::default());
        self.dome_flags.push(dome);
    }

    /// Removes every primitive whose flag is set, keeping order.
    pub fn remove_where(&mut self, dead: &[bool]) {
        let mut i = 0;
        self.primitives.retain(|_| {
            i += 1;
            !dead[i - 1]
        });
        i = 0;
        self.stats.retain(|_| {
            i += 1;
            !dead[i - 1]
        });
        i = 0;
        self.dome_flags.retain(|_| {
            i += 1;
            !dead[i - 1]
        });
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_active == 0 || self.k_active > self.k {
            return Err(Error::Config(format!("k_active {} outside [1, {}]", self.k_active, self.k)));
        }
        if self.sh_degree_active > 3 {
            return Err(Error::Config("sh degree must be at most 3".into()));
        }
        if self.len() > self.budget_max {
            return Err(Error::Contract(format!("{} primitives exceed budget {}", self.len(), self.budget_max)));
        }
        if self.stats.len() != self.len() || self.dome_flags.len() != self.len() {
            return Err(Error::Contract("per-primitive side tables out of sync".into()));
        }
        if let Some(p) = self.primitives.iter().find(|p| p.shape.frequencies() != self.k) {
            return Err(Error::Contract(format!("primitive with {} frequencies in a K={} scene", p.shape.frequencies(), self.k)));
        }
        Ok(())
    }

    /// Fails on the first primitive carrying a non-finite parameter.
    pub fn check_finite(&self) -> Result<()> {
        for (id, p) in self.primitives.iter().enumerate() {
            if let Some(param) = p.first_non_finite() {
                return Err(Error::NonFinite { id, param });
            }
        }
        Ok(())
    }
}
