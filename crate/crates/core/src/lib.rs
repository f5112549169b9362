//! Points-to authentication laboratory core.
//!
//! * [`pac`]: software pointer-authentication codes (sign, authenticate, strip).
//! * [`memory`]: simulated heap with 32-byte granules and inline object headers.
//! * [`runtime`]: object IDs, signing at allocation, checking with backward
//!   base search, invalidation at free, re-keying at realloc.
//! * [`ir`]: a small pointer IR with a text format and an interpreter.
//! * [`instrument`]: the check-insertion pass and its safe-window elision.

pub mod instrument;
pub mod ir;
pub mod memory;
pub mod pac;
pub mod runtime;

pub use memory::{HeaderLayout, HeapState};
pub use pac::{AcFunction, AuthCode, KeySlot, PacMode, RawAddress, SignedPointer};
pub use runtime::{CheckOutcome, Runtime, RuntimeConfig, ViolationKind};
