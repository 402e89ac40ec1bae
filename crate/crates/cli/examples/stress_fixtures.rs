fn main() {
    use bbcert_cli::fixture::{construct_fixture, FixtureRecipe};
    let recipes = [
        ("normal-generic", FixtureRecipe::NormalGeneric),
        ("abnormal", FixtureRecipe::Abnormal),
        ("commuting", FixtureRecipe::CommutingF1F2),
        ("broken", FixtureRecipe::CoercivityBroken),
        ("degenerate", FixtureRecipe::DegenerateDtau),
    ];
    for (name, r) in recipes {
        let mut ok = 0;
        let t0 = std::time::Instant::now();
        for seed in 0..10u64 {
            match construct_fixture(r, seed) {
                Ok(_) => ok += 1,
                Err(e) => println!("  {name} seed {seed}: {e:#}"),
            }
        }
        println!("{name}: {ok}/10 in {:?}", t0.elapsed());
    }
}
