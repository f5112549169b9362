use std::fmt::{self, Write};

use super::{Function, Instr, Operand, Program};

impl Function {
    fn fmt_operand(&self, o: &Operand) -> String {
        match o {
            Operand::Reg(r) => self.reg_name(*r).to_string(),
            Operand::Imm(n) => n.to_string(),
        }
    }

    fn fmt_mem(&self, addr: super::Reg, offset: i64) -> String {
        let a = self.reg_name(addr);
        match offset {
            0 => format!("[{a}]"),
            o if o < 0 => format!("[{a} - {}]", o.unsigned_abs()),
            o => format!("[{a} + {o}]"),
        }
    }

    fn fmt_args(&self, args: &[super::Reg]) -> String {
        args.iter().map(|r| self.reg_name(*r)).collect::<Vec<_>>().join(", ")
    }

    pub fn display_instr(&self, ins: &Instr) -> String {
        let n = |r| self.reg_name(r);
        match ins {
            Instr::Alloc { dst, size } => format!("{} = alloc {}", n(*dst), self.fmt_operand(size)),
            Instr::Free { ptr } => format!("free {}", n(*ptr)),
            Instr::Realloc { dst, ptr, size } => {
                format!("{} = realloc {}, {}", n(*dst), n(*ptr), self.fmt_operand(size))
            }
            Instr::Load { dst, addr, offset } => format!("{} = load {}", n(*dst), self.fmt_mem(*addr, *offset)),
            Instr::Store { addr, offset, value } => format!("store {}, {}", self.fmt_mem(*addr, *offset), n(*value)),
            Instr::PtrAdd { dst, ptr, bytes } => {
                format!("{} = ptradd {}, {}", n(*dst), n(*ptr), self.fmt_operand(bytes))
            }
            Instr::Copy { dst, src } => format!("{} = copy {}", n(*dst), n(*src)),
            Instr::GlobAddr { dst, global } => format!("{} = globaddr {global}", n(*dst)),
            Instr::Call { dst, callee, args } => match dst {
                Some(d) => format!("{} = call {callee}({})", n(*d), self.fmt_args(args)),
                None => format!("call {callee}({})", self.fmt_args(args)),
            },
            Instr::ExtCall { dst, name, args } => match dst {
                Some(d) => format!("{} = extcall {name}({})", n(*d), self.fmt_args(args)),
                None => format!("extcall {name}({})", self.fmt_args(args)),
            },
            Instr::Const { dst, value } => format!("{} = const {value}", n(*dst)),
            Instr::Br { target } => format!("br {target}"),
            Instr::CondBr { cond, if_true, if_false } => format!("cbr {}, {if_true}, {if_false}", n(*cond)),
            Instr::Bin { op, dst, a, b } => {
                format!("{} = {} {}, {}", n(*dst), op.mnemonic(), n(*a), self.fmt_operand(b))
            }
            Instr::Ret { value: Some(v) } => format!("ret {}", n(*v)),
            Instr::Ret { value: None } => "ret".to_string(),
            Instr::Check { ptr } => format!("check {}", n(*ptr)),
        }
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<&str> = self.params.iter().map(|r| self.reg_name(*r)).collect();
        writeln!(f, "fn {}({}) {{", self.name, params.join(", "))?;
        let mut labels = self.labels.clone();
        labels.sort_by_key(|(_, i)| *i);
        let mut li = labels.iter().peekable();
        for (i, ins) in self.body.iter().enumerate() {
            while let Some((l, _)) = li.next_if(|(_, at)| *at == i) {
                writeln!(f, "{l}:")?;
            }
            writeln!(f, "  {}", self.display_instr(ins))?;
        }
        for (l, _) in li {
            writeln!(f, "{l}:")?;
        }
        f.write_str("}\n")
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for g in &self.globals {
            writeln!(out, "global {} {}", g.name, g.size)?;
        }
        if self.entry != "main" {
            writeln!(out, "entry {}", self.entry)?;
        }
        for (i, func) in self.functions.iter().enumerate() {
            if i > 0 || !out.is_empty() {
                out.push('\n');
            }
            write!(out, "{func}")?;
        }
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use crate::ir::{parse_instrumented, parse_program};

    const SAMPLE: &str = "\
global buf 64
fn release(p) {
  free p
  ret
}

fn main() {
  a = alloc 32
  b = copy a
  g = globaddr buf
  i = const 0
loop:
  v = load [a + 8]
  store [g - 0], v
  i = add i, 1
  c = cmp i, 4
  cbr c, loop, out
out:
  extcall print_str(b)
  call release(a)
  ret
}
";

    #[test]
    fn print_parse_print_is_stable() {
        let p = parse_program(SAMPLE).unwrap();
        let printed = p.to_string();
        let again = parse_program(&printed).unwrap();
        assert_eq!(p, again);
        assert_eq!(printed, again.to_string());
    }

    #[test]
    fn trailing_label_is_kept() {
        let p = parse_program("fn main {\n  br end\nend:\n}\n").unwrap();
        assert_eq!(p.functions[0].label("end"), Some(1));
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn check_prints_and_reparses_when_allowed() {
        let p = parse_instrumented("fn main {\n  a = alloc 8\n  check a\n  ret\n}\n").unwrap();
        assert!(p.to_string().contains("  check a\n"));
    }
}
