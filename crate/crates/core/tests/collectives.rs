use phantom_parallel::collectives::{CommTag, ShardGather};
use phantom_parallel::rng::{gaussian_matrix, Stream};
use phantom_parallel::{CollectiveKind, Error, ExecMode, Matrix, World};
use proptest::prelude::*;

fn exec(threaded: bool) -> ExecMode {
    if threaded {
        ExecMode::Threaded
    } else {
        ExecMode::Lockstep
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_and_scatter_are_adjoint(
        p in 1usize..9,
        rows in 1usize..4,
        cols in 1usize..4,
        seed in any::<u64>(),
        threaded in any::<bool>(),
    ) {
        let sides = World::new(p, exec(threaded)).unwrap().run(|comm| {
            let r = comm.rank() as u64;
            let x = gaussian_matrix(rows, cols, seed, Stream::Aux(r));
            let y = gaussian_matrix(p * rows, cols, seed, Stream::Aux(64 + r));
            let gathered = ShardGather::forward(comm, &x, CommTag::forward(0))?;
            let scattered = ShardGather::backward(comm, &y, CommTag::backward(0))?;
            Ok((gathered.dot(&y), x.dot(&scattered)))
        }).unwrap();
        let lhs: f64 = sides.iter().map(|s| s.0).sum();
        let rhs: f64 = sides.iter().map(|s| s.1).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn reductions_are_identical_across_modes(p in 1usize..7, seed in any::<u64>()) {
        let program = |comm: &mut phantom_parallel::RankComm| {
            let r = comm.rank() as u64;
            let x = gaussian_matrix(p * 2, 3, seed, Stream::Aux(r));
            let sum = comm.all_reduce(&x, CommTag::forward(0))?;
            let part = comm.reduce_scatter(&x, CommTag::forward(0))?;
            let root = comm.broadcast(p - 1, &x, CommTag::forward(0))?;
            Ok((sum, part, root))
        };
        let a = World::new(p, ExecMode::Lockstep).unwrap().run(program).unwrap();
        let b = World::new(p, ExecMode::Threaded).unwrap().run(program).unwrap();
        prop_assert_eq!(&a, &b);
        for (r, (sum, part, root)) in a.iter().enumerate() {
            prop_assert_eq!(sum, &a[0].0);
            prop_assert_eq!(part, &sum.row_block(r * 2, 2));
            prop_assert_eq!(root, &gaussian_matrix(p * 2, 3, seed, Stream::Aux(p as u64 - 1)));
        }
    }
}

#[test]
fn records_carry_kind_and_size() {
    let records = World::new(3, ExecMode::Lockstep)
        .unwrap()
        .run(|comm| {
            let x = Matrix::filled(2, 5, 1.0);
            comm.all_gather(&x, CommTag::forward(1))?;
            comm.reduce_scatter(&Matrix::filled(6, 5, 1.0), CommTag::backward(1).unbilled())?;
            Ok(comm.take_records())
        })
        .unwrap();
    for r in &records {
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].collective, r[0].message_size, r[0].billable), (CollectiveKind::AllGather, 10, true));
        assert_eq!((r[1].collective, r[1].message_size, r[1].billable), (CollectiveKind::ReduceScatter, 10, false));
    }
}

#[test]
fn mismatched_collectives_fail_on_every_mode() {
    for mode in [ExecMode::Lockstep, ExecMode::Threaded] {
        let err = World::new(2, mode)
            .unwrap()
            .run(|comm| {
                let x = Matrix::zeros(1, 1);
                if comm.rank() == 0 {
                    comm.all_gather(&x, CommTag::forward(0))
                } else {
                    comm.all_reduce(&x, CommTag::forward(0))
                }
            })
            .unwrap_err();
        assert!(matches!(err, Error::Sequencing(_) | Error::Protocol { .. }), "{err}");
    }
}

#[test]
fn uneven_reduce_scatter_is_rejected() {
    let err = World::new(3, ExecMode::Lockstep)
        .unwrap()
        .run(|comm| comm.reduce_scatter(&Matrix::zeros(4, 1), CommTag::forward(0)))
        .unwrap_err();
    assert!(err.to_string().contains("cannot be split"), "{err}");
}
