//! A small pointer-centric IR.
//!
//! Programs are made of functions over named virtual registers. The text
//! format is line oriented, see [`parse`] for the grammar.

mod interp;
mod parse;
mod print;
pub mod random;

use serde::{Deserialize, Serialize};

pub use interp::{
    interpret, site_key, CostModel, ExecMode, FaultKind, GroundTruthEvent, GroundTruthKind, InterpConfig, RunReport,
    Verdict,
};
pub use parse::{parse_instrumented, parse_program, Diagnostic, ParseError};

/// Externals that never free or retain their pointer arguments.
pub const WHITELIST: [&str; 3] = ["print_str", "mem_copy", "str_copy"];

/// Every external the interpreter links, with its arity.
pub const BUILTINS: [(&str, usize); 5] =
    [("print_str", 1), ("mem_copy", 3), ("str_copy", 2), ("opaque_free", 1), ("opaque_keep", 1)];

pub fn builtin_arity(name: &str) -> Option<usize> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, a)| *a)
}

/// Index into a function's register table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u32);

impl Reg {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    /// 1 when `a < b` (signed), else 0.
    Cmp,
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Cmp => "cmp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instr {
    Alloc {
        dst: Reg,
        size: Operand,
    },
    Free {
        ptr: Reg,
    },
    Realloc {
        dst: Reg,
        ptr: Reg,
        size: Operand,
    },
    Load {
        dst: Reg,
        addr: Reg,
        offset: i64,
    },
    Store {
        addr: Reg,
        offset: i64,
        value: Reg,
    },
    PtrAdd {
        dst: Reg,
        ptr: Reg,
        bytes: Operand,
    },
    Copy {
        dst: Reg,
        src: Reg,
    },
    GlobAddr {
        dst: Reg,
        global: String,
    },
    Call {
        dst: Option<Reg>,
        callee: String,
        args: Vec<Reg>,
    },
    ExtCall {
        dst: Option<Reg>,
        name: String,
        args: Vec<Reg>,
    },
    Const {
        dst: Reg,
        value: i64,
    },
    Br {
        target: String,
    },
    CondBr {
        cond: Reg,
        if_true: String,
        if_false: String,
    },
    Bin {
        op: BinOp,
        dst: Reg,
        a: Reg,
        b: Operand,
    },
    Ret {
        value: Option<Reg>,
    },
    /// Points-to authentication of a register; only the instrumenter emits it.
    Check {
        ptr: Reg,
    },
}

impl Instr {
    pub fn def(&self) -> Option<Reg> {
        match self {
            Instr::Alloc { dst, .. }
            | Instr::Realloc { dst, .. }
            | Instr::Load { dst, .. }
            | Instr::PtrAdd { dst, .. }
            | Instr::Copy { dst, .. }
            | Instr::GlobAddr { dst, .. }
            | Instr::Const { dst, .. }
            | Instr::Bin { dst, .. } => Some(*dst),
            Instr::Call { dst, .. } | Instr::ExtCall { dst, .. } => *dst,
            _ => None,
        }
    }

    pub fn uses(&self) -> Vec<Reg> {
        fn op(o: &Operand) -> Option<Reg> {
            match o {
                Operand::Reg(r) => Some(*r),
                Operand::Imm(_) => None,
            }
        }
        match self {
            Instr::Alloc { size, .. } => op(size).into_iter().collect(),
            Instr::Free { ptr } | Instr::Check { ptr } => vec![*ptr],
            Instr::Realloc { ptr, size, .. } => std::iter::once(*ptr).chain(op(size)).collect(),
            Instr::Load { addr, .. } => vec![*addr],
            Instr::Store { addr, value, .. } => vec![*addr, *value],
            Instr::PtrAdd { ptr, bytes, .. } => std::iter::once(*ptr).chain(op(bytes)).collect(),
            Instr::Copy { src, .. } => vec![*src],
            Instr::Call { args, .. } | Instr::ExtCall { args, .. } => args.clone(),
            Instr::CondBr { cond, .. } => vec![*cond],
            Instr::Bin { a, b, .. } => std::iter::once(*a).chain(op(b)).collect(),
            Instr::Ret { value } => value.iter().copied().collect(),
            Instr::GlobAddr { .. } | Instr::Const { .. } | Instr::Br { .. } => vec![],
        }
    }

    /// Label names this instruction may jump to.
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Instr::Br { target } => vec![target],
            Instr::CondBr { if_true, if_false, .. } => vec![if_true, if_false],
            _ => vec![],
        }
    }

    /// Whether control can continue to the next instruction.
    pub fn falls_through(&self) -> bool {
        !matches!(self, Instr::Br { .. } | Instr::CondBr { .. } | Instr::Ret { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    pub body: Vec<Instr>,
    /// Label name and the index of the instruction it precedes; may equal
    /// `body.len()` for a trailing label.
    pub labels: Vec<(String, usize)>,
    /// Register names, indexed by [`Reg`].
    pub regs: Vec<String>,
    /// Source index of each instruction. Empty for uninstrumented functions,
    /// where the mapping is the identity.
    pub origin: Vec<usize>,
}

impl Function {
    pub fn reg_name(&self, r: Reg) -> &str {
        &self.regs[r.index()]
    }

    pub fn label(&self, name: &str) -> Option<usize> {
        self.labels.iter().find(|(l, _)| l == name).map(|(_, i)| *i)
    }

    pub fn source_index(&self, i: usize) -> usize {
        self.origin.get(i).copied().unwrap_or(i)
    }

    /// Control-flow successors of instruction `i`.
    pub fn successors(&self, i: usize) -> Vec<usize> {
        let ins = &self.body[i];
        let mut out: Vec<usize> = ins.targets().iter().filter_map(|t| self.label(t)).collect();
        if ins.falls_through() {
            out.push(i + 1);
        }
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalDecl {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub globals: Vec<GlobalDecl>,
    pub functions: Vec<Function>,
    pub entry: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn has_checks(&self) -> bool {
        self.functions.iter().flat_map(|f| &f.body).any(|i| matches!(i, Instr::Check { .. }))
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.body.len()).sum()
    }
}
