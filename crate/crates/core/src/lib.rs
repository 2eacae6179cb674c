pub mod error;
pub mod gcore;
pub mod pde;
pub mod lq;
pub mod mp;
pub mod scenario;

pub use error::ModelError;
pub use gcore::{penalty_cost, ConvexGenerator, DeterministicScenario, Penalty, TimeGrid, VolatilityInterval};
