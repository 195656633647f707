//! `f64` math without `std`, backed by `libm`; with the `std` feature the
//! platform math library is used instead (noticeably faster for `exp`).
//!
//! Free functions rather than methods: in test builds `std`'s inherent methods
//! would shadow a trait and silently switch implementations.

#[cfg(not(feature = "std"))]
pub(crate) use libm::{ceil, cos, exp, floor, log as ln, sqrt, tanh};

#[cfg(feature = "std")]
mod platform {
    macro_rules! forward {
        ($($name:ident => $method:ident),* $(,)?) => {
            $(
                #[inline]
                pub(crate) fn $name(x: f64) -> f64 {
                    x.$method()
                }
            )*
        };
    }

    forward!(ceil => ceil, cos => cos, exp => exp, floor => floor, ln => ln, sqrt => sqrt, tanh => tanh);
}

#[cfg(feature = "std")]
pub(crate) use platform::*;
