use crate::error::{Error, Result};

/// Per-episode success summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSuccess {
    /// Mean of the latched per-step flags.
    pub average: f64,
    /// Final flag: whether the task was completed at all.
    pub terminal: bool,
}

/// Mean of a latched success sequence. A flag that turns back off is rejected.
pub fn avg_episode_success(flags: &[bool]) -> Result<EpisodeSuccess> {
    let Some(&last) = flags.last() else {
        return Err(Error::Domain("empty episode".into()));
    };
    if flags.windows(2).any(|w| w[0] && !w[1]) {
        return Err(Error::Domain("success flags must latch".into()));
    }
    let on = flags.iter().filter(|&&f| f).count();
    Ok(EpisodeSuccess {
        average: on as f64 / flags.len() as f64,
        terminal: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latched(len: usize, first: Option<usize>) -> Vec<bool> {
        (0..len).map(|t| first.is_some_and(|f| t >= f)).collect()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(avg_episode_success(&latched(10, Some(6))).unwrap().average, 0.4);
        assert_eq!(avg_episode_success(&latched(10, None)).unwrap().average, 0.0);
        let s = avg_episode_success(&latched(10, Some(0))).unwrap();
        assert_eq!(s.average, 1.0);
        assert!(s.terminal);
    }

    #[test]
    fn errors() {
        assert!(matches!(avg_episode_success(&[]), Err(Error::Domain(_))));
        assert!(avg_episode_success(&[false, true, false]).is_err());
    }
}
