import time

from netforecast import Experiment, Topology, generate_synthetic, load_config


def main():
    import argparse

    parser = argparse.ArgumentParser(description="Benchmark netforecast training on synthetic traffic.")
    parser.add_argument(
        "topology", nargs="?", default="data/abilene.json", help="Topology JSON (default: data/abilene.json)"
    )
    parser.add_argument("--steps", type=int, default=2016, help="Synthetic timesteps")
    parser.add_argument("--epochs", type=int, default=5, help="Epochs to time")
    parser.add_argument("--set", dest="sets", action="append", default=[], help="Config override section.key=value")
    args = parser.parse_args()

    topology = Topology.from_json(args.topology)
    series = generate_synthetic(topology, args.steps, seed=0)
    config = load_config(overrides=[f"train.epochs={args.epochs}", "train.patience=1000", *args.sets])
    experiment = Experiment(config, series, topology)

    print(f"Training {args.epochs} epochs on {series.n_steps} steps x {series.n_nodes} nodes ...")
    start = time.time()
    params, history = experiment.train()
    elapsed = time.time() - start
    per_epoch = elapsed / len(history)
    print(f"{len(history)} epochs, {params.size} parameters in {elapsed:.2f} seconds ({per_epoch:.2f} s/epoch).")
    print(f"Best val MAE {history.best.val_mae:.6g} at epoch {history.best_epoch}.")


if __name__ == "__main__":
    main()
