//! Load-time scan of elevated-task code pages for forbidden privileged
//! instructions. A single hit denies execute permission for the whole page.

use thiserror::Error;

use crate::decoder::{decode, is_forbidden, Allowlist, InstrClass, InstrWord};
use crate::par::{self, Exec};

pub const PAGE_SIZE: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanVerdict {
    pub allowed: bool,
    /// Byte offset within the page and the offending class.
    pub violations: Vec<(usize, InstrClass)>,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("page length {0} is not a positive multiple of 4")]
    UnalignedLength(usize),
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("page {page}: {source}")]
pub struct TaskScanError {
    pub page: usize,
    pub source: ScanError,
}

pub fn scan_page(bytes: &[u8], allow: &Allowlist) -> Result<ScanVerdict, ScanError> {
    scan_page_with(bytes, allow, decode)
}

/// [`scan_page`] with a caller-supplied decoder, e.g. one that counts calls.
pub fn scan_page_with<D>(bytes: &[u8], allow: &Allowlist, mut decoder: D) -> Result<ScanVerdict, ScanError>
where
    D: FnMut(InstrWord) -> InstrClass,
{
    if bytes.is_empty() || !bytes.len().is_multiple_of(4) {
        return Err(ScanError::UnalignedLength(bytes.len()));
    }
    let violations: Vec<_> = bytes
        .chunks_exact(4)
        .enumerate()
        .filter_map(|(i, c)| {
            let class = decoder(InstrWord(u32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            is_forbidden(&class, allow).then_some((i * 4, class))
        })
        .collect();
    Ok(ScanVerdict { allowed: violations.is_empty(), violations })
}

pub fn scan_task<P: AsRef<[u8]> + Sync>(pages: &[P], allow: &Allowlist) -> Result<Vec<ScanVerdict>, TaskScanError> {
    scan_task_with(Exec::default(), pages, allow)
}

/// Scans pages independently; verdicts come back in input order.
pub fn scan_task_with<P: AsRef<[u8]> + Sync>(
    exec: Exec,
    pages: &[P],
    allow: &Allowlist,
) -> Result<Vec<ScanVerdict>, TaskScanError> {
    par::map(exec, pages, |p| scan_page(p.as_ref(), allow))
        .into_iter()
        .enumerate()
        .map(|(page, r)| r.map_err(|source| TaskScanError { page, source }))
        .collect()
}

/// Cuts a flat code image into pages; the last one may be short.
pub fn split_pages(bytes: &[u8], page_size: usize) -> Vec<&[u8]> {
    bytes.chunks(page_size.max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::words;

    fn page_of(words: &[u32]) -> Vec<u8> {
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    #[test]
    fn nop_page_allowed() {
        let page = page_of(&[words::NOP; 1024]);
        assert!(scan_page(&page, &Allowlist::default()).unwrap().allowed);
    }

    #[test]
    fn eret_denies_page() {
        let mut w = vec![words::NOP; 1024];
        w[128] = words::ERET;
        let v = scan_page(&page_of(&w), &Allowlist::default()).unwrap();
        assert_eq!(v, ScanVerdict { allowed: false, violations: vec![(512, InstrClass::Eret)] });
    }

    #[test]
    fn unaligned_rejected() {
        assert_eq!(scan_page(&[0; 6], &Allowlist::default()), Err(ScanError::UnalignedLength(6)));
        let pages = vec![page_of(&[words::NOP]), vec![0; 3]];
        assert_eq!(scan_task(&pages, &Allowlist::default()).unwrap_err().page, 1);
    }

    #[test]
    fn task_order_preserved() {
        let clean = page_of(&[words::NOP; 16]);
        let dirty = page_of(&[words::NOP, words::ERET]);
        let allow = Allowlist::default();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let v = scan_task_with(exec, &[&clean[..], &dirty[..], &clean[..]], &allow).unwrap();
            assert_eq!(v.iter().map(|v| v.allowed).collect::<Vec<_>>(), [true, false, true]);
        }
        assert!(scan_task::<Vec<u8>>(&[], &allow).unwrap().is_empty());
    }
}
