pub mod audit;
pub mod backend;
pub mod corpus;
pub mod detcrypt;
pub mod graph;
pub mod pii;
pub mod prompt;
pub mod rag;
pub mod sidecar;
pub mod synthesis;
