//! Exponential moving average of the online weights.

use mvsr_tensor::Real;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { alpha: 0.996 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("ema alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Deep copy of the online store.
pub fn init_average<T: Real>(online: &ParamStore<T>) -> ParamStore<T> {
    online.clone()
}

/// `average = alpha * average + (1 - alpha) * online`, element-wise, for
/// every parameter.
///
/// Evaluated as `average + (1 - alpha) * (online - average)`, which keeps
/// each result between its two inputs under rounding. `alpha == 0` copies
/// exactly.
pub fn ema_step<T: Real>(average: &mut ParamStore<T>, online: &ParamStore<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    average.check_same_layout(online)?;
    let rate = T::from_f64(1.0 - alpha);
    for (name, avg) in average.iter_mut() {
        let src = online.get(name).expect("layout checked").data();
        let dst = avg.data_mut();
        if alpha == 0.0 {
            dst.copy_from_slice(src);
            continue;
        }
        for (a, &o) in dst.iter_mut().zip(src) {
            *a += rate * (o - *a);
        }
    }
    Ok(())
}
