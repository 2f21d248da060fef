use blue_bench::{batch_of, corpus};

#[test]
fn corpus_is_seeded() {
    assert_eq!(corpus(5, 1), corpus(5, 1));
    assert_ne!(corpus(5, 1), corpus(5, 2));
}

#[test]
fn batch_covers_every_trajectory() {
    let trajs = corpus(6, 3);
    let (bbox, batch) = batch_of(&trajs);
    assert_eq!(batch.size(), 6);
    assert!(trajs.iter().flat_map(|t| &t.points).all(|p| bbox.contains(p)));
}
