//! Privilege-inversion toolkit for AArch64.
//!
//! Elevated tasks run in the privileged thread mode with `PAN` on, so their
//! regular loads and stores cannot touch unprivileged-accessible memory, while
//! `LDTR`/`STTR` can. Kernel memory and shadow stacks are unprivileged-
//! accessible; task memory is not. The modules here model that arrangement
//! and the software checks that keep it sound:
//!
//! - [`decoder`]: classify instruction words.
//! - [`perm_model`]: the architectural access check and an isolation audit.
//! - [`policy`]: layouts and CPU states for elevated and legacy tasks.
//! - [`scanner`]: load-time rejection of pages holding privileged instructions.
//! - [`asm`]: the assembly subset, its parser, printer and assembler.
//! - [`rewriter`]: shadow stack, forward-edge CFI and bit-masking passes.
//! - [`verifier`]: static checks that rewritten code is compliant.
//! - [`sim`]: an interpreter that enforces the permission model on every access.

pub mod decoder;
pub mod par;
pub mod perm_model;
pub mod policy;
pub mod scanner;
pub mod asm;
pub mod rewriter;
pub mod verifier;
pub mod sim;
