//! A Winograd F(2×2, 3×3) convolution engine embedded in a small CNN
//! inference framework with a simulated accelerator.

pub mod reference;
pub mod tensor;
pub mod winograd;
pub mod verify;
pub mod device;
pub mod net;
pub mod perf;
