//! Order-preserving map over independent work items. With the `parallel`
//! feature the map fans out over the rayon pool; without it, or when the
//! caller asks for sequential execution, it runs in the calling thread.

/// Applies `f` to every item and returns results in input order.
pub fn par_map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallel;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Whether `par_map(.., true, ..)` can use more than one thread.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = par_map(&xs, false, |i, x| (i as u64) * 1000 + x * x);
        let par = par_map(&xs, true, |i, x| (i as u64) * 1000 + x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 7000 + 49);
        assert!(par_map(&[] as &[u8], true, |_, x| *x).is_empty());
    }
}
