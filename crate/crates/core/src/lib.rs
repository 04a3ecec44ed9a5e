pub mod abi;
pub mod codegen;
pub mod emu;
pub mod ir;
pub mod layout;
pub mod stackmap;
pub mod pipeline;
pub mod migrate;
pub mod corpus;
