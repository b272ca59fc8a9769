//! Word-level pre-tokenization shared by the encoder vocabulary and the
//! n-gram metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{SYSTEM_TOKEN, USER_TOKEN};

/// Lowercases `text`, splits on whitespace and emits every punctuation
/// character as its own token. Bracketed role tokens (`[USR]`, `[SYS]`)
/// survive intact.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == USER_TOKEN || chunk == SYSTEM_TOKEN {
            out.push(String::from(chunk));
            continue;
        }
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(core::mem::take(&mut current));
                }
                let mut p = String::new();
                p.push(ch);
                out.push(p);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}
