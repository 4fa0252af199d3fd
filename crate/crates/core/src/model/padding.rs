use super::config::PaddingConfig;
use crate::error::{Error, Result};

/// `pad_prompt ∥ content ∥ [END] ∥ dummy × N`, exactly `target_length` long,
/// with `N = target_length − ℓ(pad_prompt) − ℓ(content) − 1`.
pub fn pad_prompt(content: &[u32], cfg: &PaddingConfig) -> Result<Vec<u32>> {
    let used = cfg.pad_prompt.len() + content.len() + 1;
    if used > cfg.target_length {
        return Err(Error::PaddingOverflow {
            target_length: cfg.target_length,
            content_len: content.len(),
            max_content: cfg.max_content(),
        });
    }
    let mut out = Vec::with_capacity(cfg.target_length);
    out.extend_from_slice(&cfg.pad_prompt);
    out.extend_from_slice(content);
    out.push(cfg.end_token);
    out.resize(cfg.target_length, cfg.dummy_token);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(prompt_len: usize, target_length: usize) -> PaddingConfig {
        PaddingConfig {
            pad_prompt: (1000..1000 + prompt_len as u32).collect(),
            end_token: 2000,
            dummy_token: 2001,
            target_length,
        }
    }

    #[test]
    fn sixteen_with_prompt_five_and_content_six() {
        let c = cfg(5, 16);
        let out = pad_prompt(&[1, 2, 3, 4, 5, 6], &c).unwrap();
        assert_eq!(out.len(), 16);
        assert_eq!(out[11], 2000);
        assert_eq!(out.iter().filter(|&&t| t == 2001).count(), 4);
    }

    #[test]
    fn full_scale_dummy_count() {
        let c = cfg(7, 576);
        let content: Vec<u32> = (0..40).collect();
        let out = pad_prompt(&content, &c).unwrap();
        assert_eq!(out.len(), 576);
        assert_eq!(out.iter().filter(|&&t| t == 2001).count(), 576 - 7 - 40 - 1);
    }

    #[test]
    fn overflow_reports_the_admissible_length() {
        let c = cfg(10, 16);
        match pad_prompt(&[0; 6], &c).unwrap_err() {
            Error::PaddingOverflow { max_content, content_len, .. } => {
                assert_eq!(max_content, 5);
                assert_eq!(content_len, 6);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn exact_fit_has_no_dummies() {
        let c = cfg(2, 8);
        let out = pad_prompt(&[1, 2, 3, 4, 5], &c).unwrap();
        assert_eq!(out.last(), Some(&2000));
    }

    proptest! {
        #[test]
        fn layout_holds(p in 0usize..12, q in 0usize..40, target in 1usize..64) {
            let c = cfg(p, target);
            let content: Vec<u32> = (0..q as u32).collect();
            let res = pad_prompt(&content, &c);
            if p + q + 1 > target {
                prop_assert!(res.is_err());
            } else {
                let out = res.unwrap();
                prop_assert_eq!(out.len(), target);
                prop_assert_eq!(&out[..p], &c.pad_prompt[..]);
                prop_assert_eq!(&out[p..p + q], &content[..]);
                prop_assert_eq!(out.iter().filter(|&&t| t == c.end_token).count(), 1);
                prop_assert_eq!(out[p + q], c.end_token);
                prop_assert_eq!(out.iter().filter(|&&t| t == c.dummy_token).count(), target - p - q - 1);
            }
        }
    }
}
