//! Adversarial races on the announcement lists.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::SeqCst};
use std::time::Duration;

use kotrie::alist::Uall;
use kotrie::inject::{self, Site};
use kotrie::node::{Kind, UpdateNode};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

#[test]
fn a_removed_node_never_comes_back() {
    let list = Uall::new(8);
    let others: Vec<_> = [2, 5, 5, 9]
        .iter()
        .map(|&k| Box::into_raw(UpdateNode::new(Kind::Ins, k, 4)))
        .collect();
    for &o in &others {
        unsafe { list.insert(0, o) };
    }
    let u = Box::into_raw(UpdateNode::new(Kind::Ins, 5, 4));
    let u_addr = u as usize;
    let removed = AtomicBool::new(false);
    let sightings = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for pid in 0..8usize {
            let (list, removed, sightings) = (&list, &removed, &sightings);
            s.spawn(move || {
                let mut rng = SmallRng::seed_from_u64(pid as u64);
                let _hook = inject::install(move |site| {
                    if Site::LIST.contains(&site) && rng.gen_bool(0.3) {
                        std::thread::sleep(Duration::from_micros(50));
                    }
                });
                let u = u_addr as *mut UpdateNode;
                unsafe {
                    list.insert(pid, u);
                    list.remove(u);
                }
                removed.store(true, SeqCst);
                for _ in 0..200 {
                    unsafe { list.insert(pid, u) };
                    if list.snapshot().contains(&u) {
                        sightings.fetch_add(1, SeqCst);
                    }
                }
            });
        }
    });
    assert!(removed.load(SeqCst));
    assert_eq!(sightings.load(SeqCst), 0);
    assert_eq!(unsafe { &*u }.uall_insertions(), 1);
    list.audit().unwrap();
    for o in others {
        unsafe { list.remove(o) };
        drop(unsafe { Box::from_raw(o) });
    }
    drop(unsafe { Box::from_raw(u) });
}
