//! Multi-server private information retrieval with private side information:
//! a T-private scheme and its symmetric variant, with the coding, capacity,
//! wire and audit machinery they need.

pub mod audit;
pub mod capacity;
pub mod client;
pub mod coding;
pub mod field;
pub mod linalg;
pub mod server;
pub mod stats;
pub mod store;
pub mod stpir_psi;
pub mod tpir_psi;
pub mod wire;

pub use capacity::{capacity_stpir_psi, capacity_tpir_psi, CountProfile, SchemeParams};
pub use client::{retrieve, simulate, Connection, LocalConnection, Retrieval, Scheme, Transcript};
pub use field::{Field, Symbol, Width};
pub use server::{DatabaseServer, Role};
pub use store::MessageStore;
pub use stpir_psi::SharedSecret;
pub use tpir_psi::{build_plan, DownloadPlan, SideInformation};
