//! Benchmark simulators (Duffing, Van der Pol–Mathieu, FitzHugh–Nagumo,
//! forced KdV), Runge–Kutta integrators and seeded dataset generation.

pub mod dataset;
pub mod integrate;
pub mod systems;

pub use dataset::{
    generate, generate_with_params, initial_state, kdv_profile, sample_initial_state, simulate, ParameterLaw, SamplingSpec, Trajectory,
    TrajectoryDataset,
};
pub use integrate::{rk23_advance, rk4_advance, rk4_step};
pub use systems::{mass, momentum, trapezoid, ForcingMode, Integrator, Simulator, System};
