//! Text format.
//!
//! ```text
//! ; comment to end of line
//! global NAME SIZE
//! entry NAME                      ; optional, defaults to main
//! fn NAME(PARAM, ...) {           ; the parameter list may be omitted
//! LABEL:
//!   R = alloc SIZE|R
//!   free R
//!   R = realloc R, SIZE|R
//!   R = load [R]   |  [R + OFF]  |  [R - OFF]
//!   store [R + OFF], R
//!   R = ptradd R, BYTES|R
//!   R = copy R
//!   R = globaddr NAME
//!   [R =] call NAME(R, ...)
//!   [R =] extcall NAME(R, ...)
//!   R = const IMM
//!   R = add|sub|cmp R, R|IMM
//!   br LABEL
//!   cbr R, LABEL, LABEL
//!   ret [R]
//! }
//! ```
//!
//! One instruction per line. Immediates are decimal or `0x` hex, optionally
//! negative. `check R` is accepted only by [`parse_instrumented`].

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use super::{builtin_arity, BinOp, Function, GlobalDecl, Instr, Operand, Program, Reg};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", .diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
pub struct ParseError {
    pub diagnostics: Vec<Diagnostic>,
}

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    Parser::new(false).run(text)
}

/// Like [`parse_program`] but also accepts `check` instructions, for reading
/// back instrumented output.
pub fn parse_instrumented(text: &str) -> Result<Program, ParseError> {
    Parser::new(true).run(text)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(i64),
    Punct(char),
}

fn tokenize(line: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Ident(chars[s..i].iter().collect()));
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) && !prev_is_value(&out))
        {
            let s = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[s..i].iter().filter(|c| **c != '_').collect();
            out.push(Tok::Num(parse_int(&text).ok_or_else(|| format!("bad number `{text}`"))?));
        } else if "=,()[]+-{}:".contains(c) {
            out.push(Tok::Punct(c));
            i += 1;
        } else {
            return Err(format!("unexpected character `{c}`"));
        }
    }
    Ok(out)
}

// `[r1 - 8]` is a subtraction, `const -8` is a literal.
fn prev_is_value(toks: &[Tok]) -> bool {
    matches!(toks.last(), Some(Tok::Ident(_)) | Some(Tok::Num(_)) | Some(Tok::Punct(')')) | Some(Tok::Punct(']')))
        && !matches!(toks.last(), Some(Tok::Ident(k)) if k == "const")
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        body.parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

struct FnBuilder {
    name: String,
    line: usize,
    params: Vec<Reg>,
    body: Vec<Instr>,
    lines: Vec<usize>,
    labels: Vec<(String, usize)>,
    regs: Vec<String>,
    reg_ix: HashMap<String, Reg>,
}

impl FnBuilder {
    fn reg(&mut self, name: &str) -> Reg {
        if let Some(r) = self.reg_ix.get(name) {
            return *r;
        }
        let r = Reg(self.regs.len() as u32);
        self.regs.push(name.to_string());
        self.reg_ix.insert(name.to_string(), r);
        r
    }
}

struct Parser {
    allow_check: bool,
    diags: Vec<Diagnostic>,
}

struct Cursor<'a> {
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos)
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, String> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(format!("expected {what}, found {}", show(other))),
        }
    }

    fn num(&mut self, what: &str) -> Result<i64, String> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(*n),
            other => Err(format!("expected {what}, found {}", show(other))),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), String> {
        match self.next() {
            Some(Tok::Punct(p)) if *p == c => Ok(()),
            other => Err(format!("expected `{c}`, found {}", show(other))),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(p)) if *p == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn end(&self) -> Result<(), String> {
        match self.peek() {
            None => Ok(()),
            other => Err(format!("unexpected trailing {}", show(other))),
        }
    }
}

fn show(t: Option<&Tok>) -> String {
    match t {
        None => "end of line".into(),
        Some(Tok::Ident(s)) => format!("`{s}`"),
        Some(Tok::Num(n)) => format!("`{n}`"),
        Some(Tok::Punct(c)) => format!("`{c}`"),
    }
}

impl Parser {
    fn new(allow_check: bool) -> Self {
        Parser { allow_check, diags: Vec::new() }
    }

    fn err(&mut self, line: usize, message: impl Into<String>) {
        self.diags.push(Diagnostic { line, message: message.into() });
    }

    fn run(mut self, text: &str) -> Result<Program, ParseError> {
        let mut globals: Vec<(GlobalDecl, usize)> = Vec::new();
        let mut functions: Vec<FnBuilder> = Vec::new();
        let mut entry: Option<(String, usize)> = None;
        let mut current: Option<FnBuilder> = None;

        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let code = raw.split(';').next().unwrap_or("");
            let toks = match tokenize(code) {
                Ok(t) => t,
                Err(e) => {
                    self.err(line, e);
                    continue;
                }
            };
            if toks.is_empty() {
                continue;
            }
            match current.as_mut() {
                None => match self.top_level(&toks, line) {
                    Ok(TopLevel::Global(g)) => globals.push((g, line)),
                    Ok(TopLevel::Entry(e)) => entry = Some((e, line)),
                    Ok(TopLevel::Fn(f)) => current = Some(f),
                    Err(e) => self.err(line, e),
                },
                Some(f) => {
                    if toks == [Tok::Punct('}')] {
                        functions.push(current.take().expect("inside fn"));
                        continue;
                    }
                    let mut rest: &[Tok] = &toks;
                    if let [Tok::Ident(label), Tok::Punct(':'), tail @ ..] = rest {
                        if f.labels.iter().any(|(l, _)| l == label) {
                            self.err(line, format!("duplicate label `{label}`"));
                        } else {
                            f.labels.push((label.clone(), f.body.len()));
                        }
                        rest = tail;
                    }
                    if rest.is_empty() {
                        continue;
                    }
                    match Self::instruction(f, rest) {
                        Ok(Instr::Check { .. }) if !self.allow_check => {
                            self.err(line, "`check` is reserved for instrumented programs")
                        }
                        Ok(ins) => {
                            f.body.push(ins);
                            f.lines.push(line);
                        }
                        Err(e) => self.err(line, e),
                    }
                }
            }
        }
        if let Some(f) = current {
            self.err(f.line, format!("function `{}` is not closed", f.name));
        }

        let program = Program {
            globals: globals.iter().map(|(g, _)| g.clone()).collect(),
            functions: functions
                .iter()
                .map(|f| Function {
                    name: f.name.clone(),
                    params: f.params.clone(),
                    body: f.body.clone(),
                    labels: f.labels.clone(),
                    regs: f.regs.clone(),
                    origin: Vec::new(),
                })
                .collect(),
            entry: entry.as_ref().map_or_else(|| "main".to_string(), |(e, _)| e.clone()),
        };
        self.validate(&program, &functions, &globals, entry.map_or(0, |(_, l)| l));
        if self.diags.is_empty() {
            Ok(program)
        } else {
            self.diags.sort_by_key(|d| d.line);
            Err(ParseError { diagnostics: self.diags })
        }
    }

    fn top_level(&mut self, toks: &[Tok], line: usize) -> Result<TopLevel, String> {
        let mut c = Cursor { toks, pos: 0 };
        match c.ident("`fn`, `global` or `entry`")? {
            "global" => {
                let name = c.ident("global name")?.to_string();
                let size = c.num("global size")?;
                c.end()?;
                if size <= 0 {
                    return Err(format!("global `{name}` must have a positive size"));
                }
                Ok(TopLevel::Global(GlobalDecl { name, size: size as u64 }))
            }
            "entry" => {
                let name = c.ident("entry function name")?.to_string();
                c.end()?;
                Ok(TopLevel::Entry(name))
            }
            "fn" => {
                let name = c.ident("function name")?.to_string();
                let mut f = FnBuilder {
                    name,
                    line,
                    params: Vec::new(),
                    body: Vec::new(),
                    lines: Vec::new(),
                    labels: Vec::new(),
                    regs: Vec::new(),
                    reg_ix: HashMap::new(),
                };
                if c.eat('(') && !c.eat(')') {
                    loop {
                        let p = c.ident("parameter")?;
                        if f.reg_ix.contains_key(p) {
                            return Err(format!("duplicate parameter `{p}`"));
                        }
                        let r = f.reg(p);
                        f.params.push(r);
                        if c.eat(')') {
                            break;
                        }
                        c.punct(',')?;
                    }
                }
                c.punct('{')?;
                c.end()?;
                Ok(TopLevel::Fn(f))
            }
            other => Err(format!("unexpected `{other}` at top level")),
        }
    }

    fn operand(f: &mut FnBuilder, c: &mut Cursor<'_>) -> Result<Operand, String> {
        match c.next() {
            Some(Tok::Ident(s)) => Ok(Operand::Reg(f.reg(s))),
            Some(Tok::Num(n)) => Ok(Operand::Imm(*n)),
            other => Err(format!("expected register or immediate, found {}", show(other))),
        }
    }

    fn memref(f: &mut FnBuilder, c: &mut Cursor<'_>) -> Result<(Reg, i64), String> {
        c.punct('[')?;
        let r = f.reg(c.ident("address register")?);
        let off = if c.eat('+') {
            c.num("offset")?
        } else if c.eat('-') {
            c.num("offset")?.wrapping_neg()
        } else {
            0
        };
        c.punct(']')?;
        Ok((r, off))
    }

    fn args(f: &mut FnBuilder, c: &mut Cursor<'_>) -> Result<Vec<Reg>, String> {
        c.punct('(')?;
        let mut out = Vec::new();
        if c.eat(')') {
            return Ok(out);
        }
        loop {
            out.push(f.reg(c.ident("argument register")?));
            if c.eat(')') {
                return Ok(out);
            }
            c.punct(',')?;
        }
    }

    fn instruction<'a>(f: &mut FnBuilder, toks: &'a [Tok]) -> Result<Instr, String> {
        let mut c = Cursor { toks, pos: 0 };
        let has_dst = matches!(toks.get(1), Some(Tok::Punct('=')));
        let dst_name = if has_dst {
            let d = c.ident("destination register")?;
            c.punct('=')?;
            Some(d)
        } else {
            None
        };
        let op = c.ident("opcode")?;
        let need_dst = |d: Option<&'a str>| d.ok_or_else(|| format!("`{op}` needs a destination register"));
        let no_dst = |d: Option<&str>| match d {
            Some(_) => Err(format!("`{op}` does not produce a value")),
            None => Ok(()),
        };
        let ins = match op {
            "alloc" => {
                let d = need_dst(dst_name)?;
                let dst = f.reg(d);
                Instr::Alloc { dst, size: Self::operand(f, &mut c)? }
            }
            "free" => {
                no_dst(dst_name)?;
                Instr::Free { ptr: f.reg(c.ident("pointer register")?) }
            }
            "realloc" => {
                let dst = f.reg(need_dst(dst_name)?);
                let ptr = f.reg(c.ident("pointer register")?);
                c.punct(',')?;
                Instr::Realloc { dst, ptr, size: Self::operand(f, &mut c)? }
            }
            "load" => {
                let dst = f.reg(need_dst(dst_name)?);
                let (addr, offset) = Self::memref(f, &mut c)?;
                Instr::Load { dst, addr, offset }
            }
            "store" => {
                no_dst(dst_name)?;
                let (addr, offset) = Self::memref(f, &mut c)?;
                c.punct(',')?;
                Instr::Store { addr, offset, value: f.reg(c.ident("value register")?) }
            }
            "ptradd" => {
                let dst = f.reg(need_dst(dst_name)?);
                let ptr = f.reg(c.ident("pointer register")?);
                c.punct(',')?;
                Instr::PtrAdd { dst, ptr, bytes: Self::operand(f, &mut c)? }
            }
            "copy" => {
                let dst = f.reg(need_dst(dst_name)?);
                Instr::Copy { dst, src: f.reg(c.ident("source register")?) }
            }
            "globaddr" => {
                let dst = f.reg(need_dst(dst_name)?);
                Instr::GlobAddr { dst, global: c.ident("global name")?.to_string() }
            }
            "call" | "extcall" => {
                let dst = dst_name.map(|d| f.reg(d));
                let name = c.ident("function name")?.to_string();
                let args = Self::args(f, &mut c)?;
                if op == "call" {
                    Instr::Call { dst, callee: name, args }
                } else {
                    Instr::ExtCall { dst, name, args }
                }
            }
            "const" => {
                let dst = f.reg(need_dst(dst_name)?);
                Instr::Const { dst, value: c.num("immediate")? }
            }
            "add" | "sub" | "cmp" => {
                let dst = f.reg(need_dst(dst_name)?);
                let a = f.reg(c.ident("register")?);
                c.punct(',')?;
                let b = Self::operand(f, &mut c)?;
                let op = match op {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    _ => BinOp::Cmp,
                };
                Instr::Bin { op, dst, a, b }
            }
            "br" => {
                no_dst(dst_name)?;
                Instr::Br { target: c.ident("label")?.to_string() }
            }
            "cbr" => {
                no_dst(dst_name)?;
                let cond = f.reg(c.ident("condition register")?);
                c.punct(',')?;
                let if_true = c.ident("label")?.to_string();
                c.punct(',')?;
                Instr::CondBr { cond, if_true, if_false: c.ident("label")?.to_string() }
            }
            "ret" => {
                no_dst(dst_name)?;
                match c.peek() {
                    None => Instr::Ret { value: None },
                    Some(_) => Instr::Ret { value: Some(f.reg(c.ident("return register")?)) },
                }
            }
            "check" => {
                no_dst(dst_name)?;
                Instr::Check { ptr: f.reg(c.ident("pointer register")?) }
            }
            other => return Err(format!("unknown opcode `{other}`")),
        };
        c.end()?;
        Ok(ins)
    }

    fn validate(&mut self, p: &Program, fns: &[FnBuilder], globals: &[(GlobalDecl, usize)], entry_line: usize) {
        let mut seen = HashSet::new();
        for (g, line) in globals {
            if !seen.insert(g.name.as_str()) {
                self.err(*line, format!("duplicate global `{}`", g.name));
            }
        }
        let mut names = HashSet::new();
        for f in fns {
            if !names.insert(f.name.as_str()) {
                self.err(f.line, format!("duplicate function `{}`", f.name));
            }
        }
        if p.function(&p.entry).is_none() {
            self.err(entry_line, format!("entry function `{}` is not defined", p.entry));
        }
        for (f, b) in p.functions.iter().zip(fns) {
            let mut defined: HashSet<Reg> = f.params.iter().copied().collect();
            defined.extend(f.body.iter().filter_map(Instr::def));
            for (ins, &line) in f.body.iter().zip(&b.lines) {
                for r in ins.uses() {
                    if !defined.contains(&r) {
                        self.err(line, format!("register `{}` is never assigned in `{}`", f.reg_name(r), f.name));
                    }
                }
                for t in ins.targets() {
                    if f.label(t).is_none() {
                        self.err(line, format!("undefined label `{t}`"));
                    }
                }
                match ins {
                    Instr::Call { callee, args, .. } => match p.function(callee) {
                        None => self.err(line, format!("undefined function `{callee}`")),
                        Some(target) if target.params.len() != args.len() => self.err(
                            line,
                            format!("`{callee}` takes {} arguments, {} given", target.params.len(), args.len()),
                        ),
                        _ => {}
                    },
                    Instr::ExtCall { name, args, .. } => match builtin_arity(name) {
                        None => self.err(line, format!("unknown external `{name}`")),
                        Some(n) if n != args.len() => {
                            self.err(line, format!("`{name}` takes {n} arguments, {} given", args.len()))
                        }
                        _ => {}
                    },
                    Instr::GlobAddr { global, .. } if !p.globals.iter().any(|g| &g.name == global) => {
                        self.err(line, format!("undefined global `{global}`"))
                    }
                    _ => {}
                }
            }
        }
    }
}

enum TopLevel {
    Global(GlobalDecl),
    Entry(String),
    Fn(FnBuilder),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse_program("fn main {\n  r1 = alloc 16\n  free r1\n  ret\n}\n").unwrap();
        assert_eq!(p.entry, "main");
        assert_eq!(p.functions[0].body.len(), 3);
    }

    #[test]
    fn undefined_label_is_named_with_line() {
        let err = parse_program("fn main {\n  br nowhere\n}\n").unwrap_err();
        assert_eq!(err.diagnostics.len(), 1);
        assert_eq!(err.diagnostics[0].line, 2);
        assert!(err.diagnostics[0].message.contains("nowhere"));
    }

    #[test]
    fn duplicate_label() {
        let err = parse_program("fn main {\nl:\nl:\n  ret\n}\n").unwrap_err();
        assert!(err.diagnostics[0].message.contains("duplicate label"));
    }

    #[test]
    fn undefined_register_and_function() {
        let err = parse_program("fn main {\n  free r9\n  call nope()\n  ret\n}\n").unwrap_err();
        let msgs: Vec<_> = err.diagnostics.iter().map(|d| d.message.clone()).collect();
        assert!(msgs.iter().any(|m| m.contains("r9")));
        assert!(msgs.iter().any(|m| m.contains("nope")));
    }

    #[test]
    fn unknown_external_is_a_link_error() {
        let err = parse_program("fn main {\n  extcall launch_missiles()\n  ret\n}\n").unwrap_err();
        assert!(err.diagnostics[0].message.contains("launch_missiles"));
    }

    #[test]
    fn check_is_rejected_in_source() {
        let text = "fn main {\n  r1 = alloc 8\n  check r1\n  ret\n}\n";
        assert!(parse_program(text).is_err());
        assert!(parse_instrumented(text).is_ok());
    }

    #[test]
    fn memory_operands_and_negative_offsets() {
        let p = parse_program(
            "global g 32\nfn main {\n  a = globaddr g\n  b = load [a - 8]\n  store [a+0x10], b\n  c = const -5\n  ret\n}\n",
        )
        .unwrap();
        let f = &p.functions[0];
        assert!(matches!(f.body[1], Instr::Load { offset: -8, .. }));
        assert!(matches!(f.body[2], Instr::Store { offset: 16, .. }));
        assert!(matches!(f.body[3], Instr::Const { value: -5, .. }));
    }

    #[test]
    fn labels_on_instruction_lines_and_comments() {
        let p =
            parse_program("; header\nfn main {\nstart: r1 = const 1 ; one\n  cbr r1, start, done\ndone:\n  ret\n}\n")
                .unwrap();
        let f = &p.functions[0];
        assert_eq!(f.label("start"), Some(0));
        assert_eq!(f.label("done"), Some(2));
    }

    #[test]
    fn arity_mismatch() {
        let err = parse_program("fn f(a) {\n  ret\n}\nfn main {\n  call f()\n  ret\n}\n").unwrap_err();
        assert!(err.diagnostics[0].message.contains("takes 1"));
    }

    #[test]
    fn missing_entry() {
        let err = parse_program("fn helper {\n  ret\n}\n").unwrap_err();
        assert!(err.diagnostics[0].message.contains("entry"));
    }
}
