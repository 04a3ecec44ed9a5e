//! Sectioned binary container used for linked images and checkpoints.
//!
//! Layout: 8-byte magic, 4-byte kind, u32 section count, then per section a
//! 4-byte tag, u64 length and the payload. Integers are little-endian.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::link::{Image, SiteInfo, Symbol};
use crate::abi::TargetId;
use crate::codegen::{MachineFunction, Rules};
use crate::stackmap::StackMapSection;

pub const MAGIC: &[u8; 8] = b"UNISTK\0\x01";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a container file")]
    BadMagic,
    #[error("expected a `{expected}` container, found `{found}`")]
    WrongKind { expected: String, found: String },
    #[error("truncated container")]
    Truncated,
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("malformed section `{0}`: {1}")]
    Malformed(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub kind: [u8; 4],
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn new(kind: &[u8; 4]) -> Self {
        Container { kind: *kind, sections: Vec::new() }
    }

    pub fn push(&mut self, tag: &[u8; 4], bytes: Vec<u8>) {
        self.sections.push((*tag, bytes));
    }

    pub fn section(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.sections.iter().find(|(t, _)| t == tag).map(|(_, b)| b.as_slice())
    }

    pub fn require(&self, tag: &[u8; 4]) -> Result<&[u8], ContainerError> {
        self.section(tag).ok_or_else(|| ContainerError::MissingSection(String::from_utf8_lossy(tag).into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, b) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], kind: &[u8; 4]) -> Result<Self, ContainerError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let found: [u8; 4] = bytes[8..12].try_into().unwrap();
        if &found != kind {
            return Err(ContainerError::WrongKind {
                expected: String::from_utf8_lossy(kind).into(),
                found: String::from_utf8_lossy(&found).into(),
            });
        }
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut pos = 16;
        let mut sections = Vec::new();
        for _ in 0..n {
            let hdr = bytes.get(pos..pos + 12).ok_or(ContainerError::Truncated)?;
            let tag: [u8; 4] = hdr[..4].try_into().unwrap();
            let len = u64::from_le_bytes(hdr[4..12].try_into().unwrap()) as usize;
            pos += 12;
            let body = bytes.get(pos..pos + len).ok_or(ContainerError::Truncated)?;
            sections.push((tag, body.to_vec()));
            pos += len;
        }
        if pos != bytes.len() {
            return Err(ContainerError::Truncated);
        }
        Ok(Container { kind: found, sections })
    }
}

pub fn json_section<T: for<'de> Deserialize<'de>>(c: &Container, tag: &[u8; 4]) -> Result<T, ContainerError> {
    let b = c.require(tag)?;
    serde_json::from_slice(b).map_err(|e| ContainerError::Malformed(String::from_utf8_lossy(tag).into(), e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    target: TargetId,
    rules: Rules,
    program_hash: String,
    entry: u64,
    data_base: u64,
}

#[derive(Serialize, Deserialize)]
struct ImageSyms {
    symbols: Vec<Symbol>,
    globals: Vec<Symbol>,
    sites: Vec<SiteInfo>,
}

pub const IMAGE_KIND: &[u8; 4] = b"IMG ";

pub fn write_image(img: &Image) -> Vec<u8> {
    let mut c = Container::new(IMAGE_KIND);
    let meta = ImageMeta {
        target: img.target,
        rules: img.rules,
        program_hash: img.program_hash.clone(),
        entry: img.entry,
        data_base: img.data_base,
    };
    c.push(b"META", serde_json::to_vec(&meta).unwrap());
    c.push(b"TEXT", serde_json::to_vec(&img.functions).unwrap());
    let syms = ImageSyms { symbols: img.symbols.clone(), globals: img.globals.clone(), sites: img.sites.clone() };
    c.push(b"SYMS", serde_json::to_vec(&syms).unwrap());
    c.push(b"DATA", img.data.clone());
    if let Some(sm) = &img.stackmaps {
        c.push(b"SMAP", serde_json::to_vec(sm).unwrap());
    }
    c.to_bytes()
}

pub fn read_image(bytes: &[u8]) -> Result<Image, ContainerError> {
    let c = Container::from_bytes(bytes, IMAGE_KIND)?;
    let meta: ImageMeta = json_section(&c, b"META")?;
    let functions: Vec<MachineFunction> = json_section(&c, b"TEXT")?;
    let syms: ImageSyms = json_section(&c, b"SYMS")?;
    let stackmaps: Option<StackMapSection> =
        if c.section(b"SMAP").is_some() { Some(json_section(&c, b"SMAP")?) } else { None };
    let mut img = Image {
        target: meta.target,
        rules: meta.rules,
        program_hash: meta.program_hash,
        entry: meta.entry,
        functions,
        symbols: syms.symbols,
        sites: syms.sites,
        data_base: meta.data_base,
        data: c.require(b"DATA")?.to_vec(),
        globals: syms.globals,
        stackmaps,
        ..Image::empty()
    };
    img.rebuild_index();
    Ok(img)
}
