//! Dotted-path glob matching shared by layer lookup and config resolution.
//!
//! Patterns are dotted segment lists; `*` inside a segment matches any
//! character run. A pattern matches a path when its segments match a
//! leading prefix of the path's segments, so `model` covers everything
//! under `model.` and `*` covers every path.

/// Wildcard match of one segment (no dots on either side).
fn segment_match(pattern: &str, text: &str) -> bool {
    // iterative wildcard matcher with single-star backtracking
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut mark) = (None, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// True when `pattern`'s segments match a leading prefix of `path`'s
/// segments.
pub fn prefix_match(pattern: &str, path: &str) -> bool {
    let pat: Vec<&str> = pattern.split('.').collect();
    let segs: Vec<&str> = path.split('.').collect();
    if pat.len() > segs.len() {
        return false;
    }
    pat.iter().zip(&segs).all(|(p, s)| segment_match(p, s))
}

/// Number of dotted segments in a pattern.
pub fn depth(pattern: &str) -> usize {
    pattern.split('.').count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_matches_everything() {
        assert!(prefix_match("*", "model.conv1"));
        assert!(prefix_match("*", "x"));
    }

    #[test]
    fn suffix_wildcards() {
        assert!(prefix_match("model.conv*", "model.conv1"));
        assert!(prefix_match("model.conv*", "model.conv2"));
        assert!(!prefix_match("model.conv*", "model.fc1"));
    }

    #[test]
    fn interior_wildcards() {
        assert!(prefix_match("model.block*.conv1", "model.block1.conv1"));
        assert!(prefix_match("model.block*.conv1", "model.block2.conv1"));
        assert!(!prefix_match("model.block*.conv1", "model.block1.conv2"));
    }

    #[test]
    fn prefix_covers_descendants() {
        assert!(prefix_match("model", "model.conv1"));
        assert!(prefix_match("model.block1", "model.block1.conv1"));
        assert!(!prefix_match("model.block1.conv1.extra", "model.block1.conv1"));
    }

    #[test]
    fn multiple_stars_in_segment() {
        assert!(segment_match("c*v*1", "conv1"));
        assert!(!segment_match("c*v*2", "conv1"));
        assert!(segment_match("*", ""));
    }
}
