use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Value(String),
    Int(i64),
    Float(f64),
    Punct(&'static str),
    Newline,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Value(s) => write!(f, "`%{s}`"),
            Tok::Int(i) => write!(f, "`{i}`"),
            Tok::Float(x) => write!(f, "`{x}`"),
            Tok::Punct(p) => write!(f, "`{p}`"),
            Tok::Newline => f.write_str("end of line"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Located {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl fmt::Display for Located {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub diagnostics: Vec<Located>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl ParseError {
    fn at(line: u32, col: u32, message: impl Into<String>) -> Self {
        ParseError { diagnostics: vec![Located { line, col, message: message.into() }] }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, u32, u32)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let ident_start = |c: char| c.is_ascii_alphabetic() || c == '_';
    let ident_char = |c: char| c.is_ascii_alphanumeric() || c == '_' || c == '.';
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let adv = |n: usize, i: &mut usize, col: &mut u32| {
            *i += n;
            *col += n as u32;
        };
        match c {
            '\n' => {
                out.push((Tok::Newline, tl, tc));
                i += 1;
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => adv(1, &mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '(' | ')' | '{' | '}' | ',' | ':' | '=' | '[' | ']' => {
                let p = match c {
                    '(' => "(",
                    ')' => ")",
                    '{' => "{",
                    '}' => "}",
                    ',' => ",",
                    ':' => ":",
                    '=' => "=",
                    '[' => "[",
                    _ => "]",
                };
                out.push((Tok::Punct(p), tl, tc));
                adv(1, &mut i, &mut col);
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                out.push((Tok::Punct("->"), tl, tc));
                adv(2, &mut i, &mut col);
            }
            '%' => {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && ident_char(chars[j]) {
                    j += 1;
                }
                if j == start {
                    return Err(ParseError::at(tl, tc, "expected value name after `%`"));
                }
                out.push((Tok::Value(chars[start..j].iter().collect()), tl, tc));
                adv(j - i, &mut i, &mut col);
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' => {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].is_ascii_alphanumeric()
                        || chars[j] == '.'
                        || ((chars[j] == '-' || chars[j] == '+') && matches!(chars[j - 1], 'e' | 'E')))
                {
                    j += 1;
                }
                let s: String = chars[i..j].iter().collect();
                let tok = parse_number(&s).ok_or_else(|| ParseError::at(tl, tc, format!("malformed number `{s}`")))?;
                out.push((tok, tl, tc));
                adv(j - i, &mut i, &mut col);
            }
            c if ident_start(c) => {
                let mut j = i + 1;
                while j < chars.len()
                    && (ident_char(chars[j])
                        || (chars[j] == '-' && chars.get(j + 1).is_some_and(|n| n.is_ascii_alphabetic())))
                {
                    j += 1;
                }
                out.push((Tok::Ident(chars[i..j].iter().collect()), tl, tc));
                adv(j - i, &mut i, &mut col);
            }
            other => return Err(ParseError::at(tl, tc, format!("unexpected character `{other}`"))),
        }
    }
    out.push((Tok::Eof, line, col));
    Ok(out)
}

fn parse_number(s: &str) -> Option<Tok> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        let v = u64::from_str_radix(&hex.replace('_', ""), 16).ok()? as i64;
        return Some(Tok::Int(if neg { v.wrapping_neg() } else { v }));
    }
    if body.contains(['.', 'e', 'E']) || body == "inf" || body == "nan" {
        return s.parse::<f64>().ok().map(Tok::Float);
    }
    let v: i128 = body.replace('_', "").parse().ok()?;
    let v = if neg { -v } else { v };
    if v < i64::MIN as i128 || v > u64::MAX as i128 {
        return None;
    }
    Some(Tok::Int(v as i64))
}

/// Source positions of each instruction, keyed by (function, block, index).
type PosTable = HashMap<(usize, usize, usize), (u32, u32)>;

struct Parser {
    toks: Vec<(Tok, u32, u32)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].0
    }

    fn here(&self) -> (u32, u32) {
        let t = &self.toks[self.pos];
        (t.1, t.2)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        let (l, c) = self.here();
        ParseError::at(l, c, format!("syntax error: expected {expected}, found {}", self.peek()))
    }

    fn skip_newlines(&mut self) {
        while *self.peek() == Tok::Newline {
            self.bump();
        }
    }

    fn punct(&mut self, p: &'static str) -> Result<(), ParseError> {
        if *self.peek() == Tok::Punct(p) {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&format!("`{p}`")))
        }
    }

    fn eat(&mut self, p: &'static str) -> bool {
        if *self.peek() == Tok::Punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.error(what)),
        }
    }

    fn value(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Value(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.error("a `%value`")),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => Err(self.error("an integer")),
        }
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek().clone() {
            Tok::Value(s) => {
                self.bump();
                Ok(Operand::Value(s))
            }
            Tok::Int(v) => {
                self.bump();
                Ok(Operand::Imm(v))
            }
            _ => Err(self.error("a `%value` or integer")),
        }
    }

    fn ty(&mut self) -> Result<IrType, ParseError> {
        let (l, c) = self.here();
        let name = self.ident("a type")?;
        IrType::parse(&name).ok_or_else(|| ParseError::at(l, c, format!("unknown type `{name}`")))
    }

    fn end_of_inst(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Punct("}") | Tok::Eof => Ok(()),
            _ => Err(self.error("end of line")),
        }
    }

    fn scalar_bits(&mut self, ty: IrType) -> Result<u64, ParseError> {
        match (self.peek().clone(), ty) {
            (Tok::Int(v), IrType::F64) => {
                self.bump();
                Ok((v as f64).to_bits())
            }
            (Tok::Int(v), _) => {
                self.bump();
                Ok(v as u64)
            }
            (Tok::Float(x), IrType::F64) => {
                self.bump();
                Ok(x.to_bits())
            }
            (Tok::Ident(s), IrType::F64) if s == "bits" => {
                self.bump();
                Ok(self.int()? as u64)
            }
            _ => Err(self.error(if ty == IrType::F64 { "a number" } else { "an integer" })),
        }
    }

    fn global(&mut self) -> Result<GlobalDef, ParseError> {
        let name = self.ident("a global name")?;
        self.punct(":")?;
        let ty = self.ty()?;
        let count = if self.eat("[") {
            let n = self.int()?;
            self.punct("]")?;
            if n <= 0 {
                return Err(self.error("a positive element count"));
            }
            n as usize
        } else {
            1
        };
        let mut init = vec![0u8; count * 8];
        if self.eat("=") {
            for i in 0..count {
                if i > 0 {
                    self.punct(",")?;
                }
                let bits = self.scalar_bits(ty)?;
                init[i * 8..i * 8 + 8].copy_from_slice(&bits.to_le_bytes());
            }
        }
        self.end_of_inst()?;
        Ok(GlobalDef { name, ty, init })
    }

    fn function(&mut self, fidx: usize, table: &mut PosTable) -> Result<IrFunction, ParseError> {
        let name = self.ident("a function name")?;
        self.punct("(")?;
        let mut params = Vec::new();
        if !self.eat(")") {
            loop {
                let pname = self.value()?;
                self.punct(":")?;
                let ty = self.ty()?;
                params.push(Param { name: pname, ty });
                if self.eat(")") {
                    break;
                }
                self.punct(",")?;
            }
        }
        let ret_ty = if self.eat("->") { self.ty()? } else { IrType::I64 };
        self.punct("{")?;
        let mut locals = Vec::new();
        let mut blocks: Vec<IrBlock> = Vec::new();
        loop {
            self.skip_newlines();
            match self.peek().clone() {
                Tok::Punct("}") => {
                    self.bump();
                    break;
                }
                Tok::Eof => return Err(self.error("`}`")),
                Tok::Ident(kw) if kw == "local" => {
                    self.bump();
                    let lname = self.ident("a local name")?;
                    self.punct(":")?;
                    let ty = self.ty()?;
                    let size = match self.peek() {
                        Tok::Int(_) => {
                            let s = self.int()?;
                            if s <= 0 || s > u32::MAX as i64 {
                                return Err(self.error("a positive byte size"));
                            }
                            s as u32
                        }
                        _ => ty.size(),
                    };
                    self.end_of_inst()?;
                    locals.push(Local { name: lname, ty, size });
                }
                Tok::Ident(label) if *self.peek_at(1) == Tok::Punct(":") => {
                    self.bump();
                    self.bump();
                    blocks.push(IrBlock { label, insts: Vec::new() });
                }
                _ => {
                    let pos = self.here();
                    let inst = self.inst()?;
                    if blocks.is_empty() {
                        blocks.push(IrBlock { label: "entry".into(), insts: Vec::new() });
                    }
                    let bidx = blocks.len() - 1;
                    table.insert((fidx, bidx, blocks[bidx].insts.len()), pos);
                    blocks[bidx].insts.push(inst);
                }
            }
        }
        Ok(IrFunction { name, params, locals, blocks, ret_ty })
    }

    fn inst(&mut self) -> Result<Inst, ParseError> {
        let dst = if let Tok::Value(v) = self.peek().clone() {
            self.bump();
            self.punct("=")?;
            Some(v)
        } else {
            None
        };
        let (ol, oc) = self.here();
        let opcode = self.ident("an opcode")?;
        let need_dst = |_: &Parser, d: &Option<String>| -> Result<String, ParseError> {
            d.clone().ok_or_else(|| ParseError::at(ol, oc, format!("`{opcode}` requires a result value")))
        };
        let no_dst = |d: &Option<String>| -> Result<(), ParseError> {
            match d {
                Some(_) => Err(ParseError::at(ol, oc, format!("`{opcode}` produces no result"))),
                None => Ok(()),
            }
        };
        let inst = match opcode.as_str() {
            "const" => {
                let dst = need_dst(self, &dst)?;
                let ty = match self.peek().clone() {
                    Tok::Ident(t) if IrType::parse(&t).is_some() => {
                        self.bump();
                        IrType::parse(&t).unwrap()
                    }
                    _ => IrType::I64,
                };
                let bits = self.scalar_bits(ty)?;
                Inst::Const { dst, ty, bits }
            }
            "add" | "sub" | "mul" => {
                let dst = need_dst(self, &dst)?;
                let lhs = self.operand()?;
                self.punct(",")?;
                let rhs = self.operand()?;
                let op = match opcode.as_str() {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    _ => BinOp::Mul,
                };
                Inst::Bin { op, dst, lhs, rhs }
            }
            "fadd" | "fmul" => {
                let dst = need_dst(self, &dst)?;
                let lhs = self.value()?;
                self.punct(",")?;
                let rhs = self.value()?;
                let op = if opcode == "fadd" { FBinOp::FAdd } else { FBinOp::FMul };
                Inst::FBin { op, dst, lhs, rhs }
            }
            "load" => Inst::Load { dst: need_dst(self, &dst)?, addr: self.value()? },
            "fload" => Inst::FLoad { dst: need_dst(self, &dst)?, addr: self.value()? },
            "store" => {
                no_dst(&dst)?;
                let value = self.operand()?;
                self.punct(",")?;
                Inst::Store { value, addr: self.value()? }
            }
            "fstore" => {
                no_dst(&dst)?;
                let value = self.value()?;
                self.punct(",")?;
                Inst::FStore { value, addr: self.value()? }
            }
            "addr-of-local" => Inst::AddrOfLocal { dst: need_dst(self, &dst)?, local: self.ident("a local name")? },
            "addr-of-global" => Inst::AddrOfGlobal { dst: need_dst(self, &dst)?, global: self.ident("a global name")? },
            "call" => {
                let callee = self.ident("a function name")?;
                self.punct("(")?;
                let mut args = Vec::new();
                if !self.eat(")") {
                    loop {
                        args.push(self.operand()?);
                        if self.eat(")") {
                            break;
                        }
                        self.punct(",")?;
                    }
                }
                Inst::Call { dst, callee, args }
            }
            "cmp" => {
                let dst = need_dst(self, &dst)?;
                let (cl, cc) = self.here();
                let cname = self.ident("a condition")?;
                let cond = Cond::parse(&cname).ok_or_else(|| ParseError::at(cl, cc, format!("unknown condition `{cname}`")))?;
                let lhs = self.value()?;
                self.punct(",")?;
                Inst::Cmp { dst, cond, lhs, rhs: self.operand()? }
            }
            "emit" => {
                no_dst(&dst)?;
                Inst::Emit { value: self.operand()? }
            }
            "br" => {
                no_dst(&dst)?;
                Inst::Br { target: self.ident("a block label")? }
            }
            "br-cond" => {
                no_dst(&dst)?;
                let cond = self.value()?;
                self.punct(",")?;
                let then_to = self.ident("a block label")?;
                self.punct(",")?;
                Inst::BrCond { cond, then_to, else_to: self.ident("a block label")? }
            }
            "ret" => {
                no_dst(&dst)?;
                let value = match self.peek() {
                    Tok::Newline | Tok::Punct("}") | Tok::Eof => None,
                    _ => Some(self.operand()?),
                };
                Inst::Ret { value }
            }
            other => return Err(ParseError::at(ol, oc, format!("unknown opcode `{other}`"))),
        };
        self.end_of_inst()?;
        Ok(inst)
    }
}

/// Parse IR text and validate it. Any validation diagnostic fails the parse.
pub fn parse_program(text: &str) -> Result<IrProgram, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    let mut globals: Vec<GlobalDef> = Vec::new();
    let mut functions: Vec<IrFunction> = Vec::new();
    let mut entry = None;
    let mut table = PosTable::new();
    let mut fn_pos = Vec::new();
    loop {
        p.skip_newlines();
        let (l, c) = p.here();
        match p.bump() {
            Tok::Eof => break,
            Tok::Ident(kw) if kw == "global" => {
                let g = p.global()?;
                if globals.iter().any(|o| o.name == g.name) {
                    return Err(ParseError::at(l, c, format!("duplicate symbol `{}`", g.name)));
                }
                globals.push(g);
            }
            Tok::Ident(kw) if kw == "func" => {
                let f = p.function(functions.len(), &mut table)?;
                if functions.iter().any(|o| o.name == f.name) {
                    return Err(ParseError::at(l, c, format!("duplicate symbol `{}`", f.name)));
                }
                fn_pos.push((l, c));
                functions.push(f);
            }
            Tok::Ident(kw) if kw == "entry" => {
                entry = Some(p.ident("a function name")?);
                p.end_of_inst()?;
            }
            t => return Err(ParseError::at(l, c, format!("syntax error: expected `func`, `global` or `entry`, found {t}"))),
        }
    }
    let entry = entry.unwrap_or_else(|| "main".to_string());
    let prog = IrProgram { globals, functions, entry };
    let diags = validate(&prog);
    if diags.is_empty() {
        return Ok(prog);
    }
    let diagnostics = diags
        .into_iter()
        .map(|d| {
            let (line, col) = match (d.function, d.block, d.index) {
                (Some(f), Some(b), Some(i)) => table.get(&(f, b, i)).copied().unwrap_or(fn_pos[f]),
                (Some(f), _, _) => fn_pos.get(f).copied().unwrap_or((1, 1)),
                _ => (1, 1),
            };
            Located { line, col, message: d.to_string() }
        })
        .collect();
    Err(ParseError { diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse_program("func main() { ret 0 }").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert!(p.globals.is_empty());
        assert_eq!(p.functions[0].blocks[0].insts, vec![Inst::Ret { value: Some(Operand::Imm(0)) }]);
    }

    #[test]
    fn unresolved_call() {
        let err = parse_program("func main() {\n  call nowhere()\n  ret 0\n}").unwrap_err();
        assert_eq!(err.diagnostics.len(), 1);
        assert!(err.diagnostics[0].message.contains("unresolved call target"), "{err}");
        assert_eq!(err.diagnostics[0].line, 2);
    }

    #[test]
    fn unknown_opcode_has_position() {
        let err = parse_program("func main() {\n  %a = frob 1\n  ret 0\n}").unwrap_err();
        assert_eq!(err.diagnostics[0].line, 2);
        assert_eq!(err.diagnostics[0].col, 8);
        assert!(err.diagnostics[0].message.contains("unknown opcode"));
    }

    #[test]
    fn syntax_error_names_expected_token() {
        let err = parse_program("func main( { ret 0 }").unwrap_err();
        assert!(err.diagnostics[0].message.contains("expected"), "{err}");
    }

    #[test]
    fn duplicate_symbol() {
        let err = parse_program("global g: i64 = 1\nglobal g: i64 = 2\nfunc main() { ret 0 }").unwrap_err();
        assert!(err.diagnostics[0].message.contains("duplicate symbol"));
        let err = parse_program("func main() { ret 0 }\nfunc main() { ret 1 }").unwrap_err();
        assert!(err.diagnostics[0].message.contains("duplicate symbol"));
    }

    #[test]
    fn globals_and_numbers() {
        let p = parse_program(
            "global g: i64 = -3\nglobal a: i64[2] = 0x10, 7\nglobal f: f64 = 1.5\nfunc main() { ret 0 }",
        )
        .unwrap();
        assert_eq!(p.globals[0].init, (-3i64).to_le_bytes());
        assert_eq!(p.globals[1].init.len(), 16);
        assert_eq!(p.globals[1].init[0], 0x10);
        assert_eq!(p.globals[2].init, 1.5f64.to_bits().to_le_bytes());
    }
}
