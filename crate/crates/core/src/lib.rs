//! Workflow-graph toolkit for ComfyUI.
//!
//! Converts ComfyUI workflow JSON to and from a compact link-list diagram
//! representation, cleans and validates workflow graphs, corrects unknown
//! nodes via embedding retrieval plus a pluggable LLM selector, exposes
//! group-relative reward/advantage math as pure functions, and evaluates
//! generation backends with format/executability/alignment/diversity
//! metrics.

pub mod bench;
pub mod executor;
pub mod genflow;
pub mod ir;
pub mod llm;
pub mod nodebase;
pub mod prompts;
pub mod refine;
pub mod reformat;

/// Applies `f` to every item on up to `parallelism` worker threads and
/// returns the results in input order. Falls back to a plain map for a
/// single worker or a single item.
pub fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    let n = items.len();
    let workers = parallelism.clamp(1, n.max(1));
    if n == 0 || workers == 1 {
        return items.iter().map(f).collect();
    }
    let cursor = AtomicUsize::new(0);
    let mut collected: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = cursor.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        local.push((i, f(&items[i])));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    collected.sort_by_key(|(i, _)| *i);
    collected.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        let doubled = super::parallel_map(&items, 8, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let empty: Vec<u32> = vec![];
        assert!(super::parallel_map(&empty, 4, |x| *x).is_empty());
    }
}
