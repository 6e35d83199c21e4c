use hmctc::train::{ScheduleConfig, ScheduleState};

fn cfg(warm: usize) -> ScheduleConfig {
    ScheduleConfig {
        checkpoint_interval: 10,
        warm_updates: warm,
        patience: 10,
        lookback: 3,
        max_updates: usize::MAX,
    }
}

/// Feeds `(updates, metric)` pairs and returns the lr after each checkpoint.
fn replay(cfg: &ScheduleConfig, points: &[(usize, f64)]) -> (ScheduleState, Vec<f64>) {
    let mut s = ScheduleState::new(1.0);
    let lrs = points
        .iter()
        .map(|&(u, m)| {
            s.record(m, u, cfg);
            s.lr
        })
        .collect();
    (s, lrs)
}

#[test]
fn halves_when_worse_than_the_last_three() {
    let (_, lrs) = replay(&cfg(0), &[(10, 30.0), (20, 28.0), (30, 29.0), (40, 30.5)]);
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
}

#[test]
fn ties_with_the_worst_recent_checkpoint_do_not_halve() {
    let (_, lrs) = replay(&cfg(0), &[(10, 30.0), (20, 28.0), (30, 29.0), (40, 30.0)]);
    assert_eq!(lrs, vec![1.0; 4]);
}

#[test]
fn needs_three_earlier_checkpoints() {
    let (_, lrs) = replay(&cfg(0), &[(10, 10.0), (20, 50.0), (30, 90.0)]);
    assert_eq!(lrs, vec![1.0; 3]);
}

#[test]
fn warm_period_freezes_the_rate() {
    let warm = cfg(45);
    let (_, lrs) = replay(&warm, &[(10, 30.0), (20, 31.0), (30, 32.0), (40, 33.0), (50, 34.0)]);
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.5]);
    // the first update count at the boundary already counts as warm
    let edge = cfg(40);
    let (_, lrs) = replay(&edge, &[(10, 30.0), (20, 31.0), (30, 32.0), (40, 33.0)]);
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
}

#[test]
fn at_most_one_halving_per_checkpoint() {
    let (s, lrs) = replay(&cfg(0), &[(10, 1.0), (20, 2.0), (30, 3.0), (40, 4.0), (50, 5.0), (60, 6.0)]);
    assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.25, 0.125]);
    assert_eq!(s.halvings, 3);
}

#[test]
fn stops_after_ten_checkpoints_without_a_new_best() {
    let c = cfg(usize::MAX);
    let mut s = ScheduleState::new(1.0);
    s.record(20.0, 10, &c);
    for k in 0..9 {
        s.record(25.0, 20 + k, &c);
        assert!(!s.should_stop(&c));
    }
    s.record(20.0, 100, &c);
    assert!(s.should_stop(&c), "a tie is not an improvement");
}

#[test]
fn improvement_resets_the_patience_counter() {
    let c = cfg(usize::MAX);
    let mut s = ScheduleState::new(1.0);
    s.record(20.0, 10, &c);
    for k in 0..9 {
        s.record(25.0, 20 + k, &c);
    }
    s.record(19.0, 100, &c);
    assert_eq!(s.stale, 0);
    assert_eq!(s.best_value(), Some(19.0));
    for k in 0..9 {
        s.record(19.5, 200 + k, &c);
    }
    assert!(!s.should_stop(&c));
    s.record(19.5, 300, &c);
    assert!(s.should_stop(&c));
}
