//! Whole-program build: lower for both targets, place jointly, link.

use thiserror::Error;

use crate::abi::TargetId;
use crate::codegen::{compile_program, CodegenError, Rules};
use crate::ir::{parse_program, IrProgram, ParseError};
use crate::layout::{link, FixpointReport, Image, LinkError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

#[derive(Debug, Clone)]
pub struct Build {
    pub x64: Image,
    pub a64: Image,
    pub fixpoint: FixpointReport,
}

impl Build {
    pub fn image(&self, t: TargetId) -> &Image {
        match t {
            TargetId::X64 => &self.x64,
            TargetId::A64 => &self.a64,
        }
    }
}

pub fn build_program(prog: &IrProgram, rules: &Rules) -> Result<Build, BuildError> {
    let fx = compile_program(prog, TargetId::X64, rules)?;
    let fa = compile_program(prog, TargetId::A64, rules)?;
    let (x64, a64, fixpoint) = link(prog, fx, fa, rules)?;
    Ok(Build { x64, a64, fixpoint })
}

pub fn build_source(src: &str, rules: &Rules) -> Result<(IrProgram, Build), BuildError> {
    let prog = parse_program(src)?;
    let b = build_program(&prog, rules)?;
    Ok((prog, b))
}
