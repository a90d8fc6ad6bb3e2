//! Fixtures shared by the criterion benches.

use liftrefine::model::View;
use liftrefine::{CameraPose, Intrinsics, Tensor};

/// `n` orbit views of a smooth synthetic pattern at `size × size`.
pub fn orbit_views(n: usize, size: usize) -> Vec<View> {
    let k = Intrinsics::centered(1.5 * size as f64, size, size);
    (0..n)
        .map(|i| {
            let az = 0.9 * i as f64;
            let image = Tensor::from_fn([3, size, size], |j| 0.5 + 0.4 * ((j + 7 * i) as f64 * 0.37).sin());
            View {
                image,
                pose: CameraPose::orbit(k, az, 0.3, 1.3).expect("orbit pose"),
            }
        })
        .collect()
}
