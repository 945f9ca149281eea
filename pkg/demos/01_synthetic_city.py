"""A tour of the synthetic city and the three region correlation graphs.

Run with ``python demos/01_synthetic_city.py``. Nothing is trained here: the
point is to see how much of the planted community structure each data source
carries before any learning happens.
"""

import numpy as np

from urbanembed import correlation as corr
from urbanembed import evaluation as ev
from urbanembed import kg
from urbanembed.synth import SynthConfig, generate_city


def show_grid(labels, width):
    for row in labels.reshape(-1, width):
        print("   ", " ".join(str(x) for x in row))


def main():
    config = SynthConfig()
    city = generate_city(config)
    n = city.registry.n
    print(f"{config.width}x{config.height} grid, {config.communities} communities, "
          f"{len(city.trips)} trips, {len(city.pois)} POIs")
    print("planted communities (a quarter of the cells shuffled out of their block):")
    show_grid(city.labels, config.width)

    same = np.mean([city.labels[t.origin] == city.labels[t.destination] for t in city.trips])
    print(f"share of trips that stay inside their community: {same:.2f}")

    # Build each correlation matrix and ask k-means how well its rows alone
    # separate the communities.
    od = corr.od_distributions(corr.cooccurrence_counts(city.trips, n))
    vocab, triples = kg.build_kg(city.pois, city.registry)
    print(f"knowledge graph: {len(vocab.entities)} entities, {len(vocab.relations)} relations, "
          f"{len(triples)} triples")
    params = kg.train_kg(triples, vocab)
    vectors, _ = kg.region_functionality_vectors(params, vocab)

    matrices = {
        "accessibility (trips)": corr.accessibility_correlation(od.p_o, od.p_d),
        "vicinity (adjacency)": corr.vicinity_correlation(city.adjacency),
        "functionality (POI KG)": corr.functionality_correlation(vectors),
    }
    print("\nNMI of k-means on the raw correlation rows:")
    for name, m in matrices.items():
        res = ev.evaluate_clustering(m.values, city.labels, k=config.communities)
        print(f"  {name:24s} {res.nmi:.3f}")

    graph = corr.knn_graph(matrices["accessibility (trips)"], k=10)
    pure = np.mean([city.labels[j] == city.labels[i] for i, nb in enumerate(graph.neighbors) for j in nb])
    print(f"\n10-NN accessibility graph: {pure:.0%} of edges join regions of the same community")


if __name__ == "__main__":
    main()
