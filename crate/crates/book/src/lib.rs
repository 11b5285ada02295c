//! Compiles every chapter of the guide as documentation so that
//! `cargo test` runs its code blocks.

macro_rules! chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        )*
    };
}

chapters! {
    Introduction => "introduction.md",
    Tensors => "tensors.md",
    MarketData => "market_data.md",
    Features => "features.md",
    Changepoints => "changepoints.md",
    Model => "model.md",
    Training => "training.md",
    Backtest => "backtest.md",
    Cli => "cli.md",
}
