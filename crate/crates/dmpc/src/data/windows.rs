//! Training-window extraction with discounted returns-to-go.

use super::{DataError, Dataset};

/// One training tuple: the anchor state, its history, the next F actions and
/// states, the step reward, and the discounted return-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Episode index within the dataset.
    pub episode: usize,
    /// Anchor step t within the episode.
    pub t: usize,
    /// Anchor state s_t.
    pub state: Vec<f64>,
    /// History states s_{t−H+1}..s_{t−1} (empty when H = 1).
    pub history_states: Vec<Vec<f64>>,
    /// History actions a_{t−H+1}..a_{t−1} (empty when H = 1).
    pub history_actions: Vec<Vec<f64>>,
    /// Future actions a_t..a_{t+F−1}.
    pub actions: Vec<Vec<f64>>,
    /// Future states s_{t+1}..s_{t+F}.
    pub next_states: Vec<Vec<f64>>,
    /// Step reward r_t.
    pub reward: f64,
    /// Discounted return-to-go G_t.
    pub return_to_go: f64,
}

/// Discounted returns-to-go for one trajectory, applying the termination
/// penalty to the final reward of early-terminated episodes.
fn returns_to_go(rewards: &[f64], terminated_early: bool, gamma: f64, penalty: f64) -> Vec<f64> {
    let t = rewards.len();
    let mut g = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let mut r = rewards[i];
        if i == t - 1 && terminated_early {
            r -= penalty;
        }
        acc = r + gamma * acc;
        g[i] = acc;
    }
    g
}

/// Extracts every valid window: t ranges over [H−1, T−1−F] per trajectory.
/// Returns an error when no trajectory admits a window.
pub fn make_windows(
    dataset: &Dataset,
    f: usize,
    h: usize,
    gamma: f64,
    penalty: f64,
) -> Result<Vec<Window>, DataError> {
    if f < 1 || h < 1 {
        return Err(DataError::Invalid(format!("need F >= 1 and H >= 1, got F={f}, H={h}")));
    }
    let mut out = Vec::new();
    for (e, traj) in dataset.episodes.iter().enumerate() {
        let t_len = traj.len();
        if t_len < f + h {
            continue;
        }
        let g = returns_to_go(&traj.rewards, traj.terminated_early, gamma, penalty);
        for t in (h - 1)..=(t_len - 1 - f) {
            out.push(Window {
                episode: e,
                t,
                state: traj.states[t].clone(),
                history_states: traj.states[t + 1 - h..t].to_vec(),
                history_actions: traj.actions[t + 1 - h..t].to_vec(),
                actions: traj.actions[t..t + f].to_vec(),
                next_states: traj.states[t + 1..=t + f].to_vec(),
                reward: traj.rewards[t],
                return_to_go: g[t],
            });
        }
    }
    if out.is_empty() {
        return Err(DataError::EmptyWindows { f, h });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Quality, Trajectory};
    use crate::envs::EnvName;
    use proptest::prelude::*;

    fn dataset_from(trajs: Vec<Trajectory>) -> Dataset {
        Dataset {
            env: EnvName::Pointmass2d,
            state_dim: 1,
            action_dim: 1,
            quality: Quality::Medium,
            seed: 0,
            episodes: trajs,
        }
    }

    fn line_traj(t: usize, terminated_early: bool) -> Trajectory {
        Trajectory {
            states: (0..t).map(|i| vec![i as f64]).collect(),
            actions: (0..t).map(|i| vec![10.0 + i as f64]).collect(),
            rewards: vec![1.0; t],
            terminated_early,
        }
    }

    #[test]
    fn window_count_t10_f4_h1() {
        let ds = dataset_from(vec![line_traj(10, false)]);
        let w = make_windows(&ds, 4, 1, 0.99, 100.0).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].t, 0);
        assert_eq!(w[5].t, 5);
    }

    #[test]
    fn window_contents_are_aligned() {
        let ds = dataset_from(vec![line_traj(10, false)]);
        let w = make_windows(&ds, 4, 2, 0.99, 100.0).unwrap();
        // H=2: t starts at 1; history holds exactly s_{t-1}, a_{t-1}.
        let first = &w[0];
        assert_eq!(first.t, 1);
        assert_eq!(first.history_states, vec![vec![0.0]]);
        assert_eq!(first.history_actions, vec![vec![10.0]]);
        assert_eq!(first.state, vec![1.0]);
        assert_eq!(first.actions, vec![vec![11.0], vec![12.0], vec![13.0], vec![14.0]]);
        assert_eq!(first.next_states, vec![vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
    }

    #[test]
    fn geometric_series_return() {
        let ds = dataset_from(vec![line_traj(32, false)]);
        let w = make_windows(&ds, 1, 1, 0.99, 100.0).unwrap();
        let expected = 27.501966404214624;
        assert!((w[0].return_to_go - expected).abs() < 1e-9, "G_0 = {}", w[0].return_to_go);
    }

    #[test]
    fn termination_penalty_golden() {
        let g = returns_to_go(&[1.0, 1.0], true, 0.99, 100.0);
        assert!((g[0] - -97.01).abs() < 1e-12, "G_0 = {}", g[0]);
    }

    #[test]
    fn penalty_only_applies_when_terminated_early() {
        let with = returns_to_go(&[1.0, 1.0], true, 0.99, 100.0);
        let without = returns_to_go(&[1.0, 1.0], false, 0.99, 100.0);
        assert!((without[0] - 1.99).abs() < 1e-12);
        assert!((with[0] - (without[0] - 0.99 * 100.0)).abs() < 1e-12);
    }

    #[test]
    fn short_trajectories_yield_empty_windows_error() {
        let ds = dataset_from(vec![line_traj(4, false)]);
        let err = make_windows(&ds, 10, 1, 0.99, 100.0).unwrap_err();
        assert!(matches!(err, DataError::EmptyWindows { f: 10, h: 1 }));
    }

    #[test]
    fn mixed_lengths_skip_only_short_trajectories() {
        let ds = dataset_from(vec![line_traj(4, false), line_traj(12, false)]);
        let w = make_windows(&ds, 6, 1, 0.99, 100.0).unwrap();
        assert_eq!(w.len(), 6);
        assert!(w.iter().all(|win| win.episode == 1));
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(lens in proptest::collection::vec(2usize..30, 1..5),
                                     f in 1usize..6, h in 1usize..4) {
            let ds = dataset_from(lens.iter().map(|t| line_traj(*t, false)).collect());
            let expected: usize =
                lens.iter().map(|t| t.saturating_sub(f + h - 1)).sum();
            match make_windows(&ds, f, h, 0.99, 100.0) {
                Ok(w) => prop_assert_eq!(w.len(), expected),
                Err(DataError::EmptyWindows { .. }) => prop_assert_eq!(expected, 0),
                Err(other) => return Err(TestCaseError::fail(other.to_string())),
            }
        }

        #[test]
        fn return_recursion_holds(rewards in proptest::collection::vec(-2.0f64..2.0, 3..40),
                                  terminated in any::<bool>()) {
            let g = returns_to_go(&rewards, terminated, 0.99, 100.0);
            for t in 0..rewards.len() - 1 {
                prop_assert!((g[t] - (rewards[t] + 0.99 * g[t + 1])).abs() < 1e-9);
            }
        }
    }
}
