#!/usr/bin/env python
"""
Write a toy joint regressor and a matching mesh sequence.

Every regressor row is a convex combination of a few vertices, so regressed
joints stay inside the mesh hull. The meshes are the bundled rest pose with
each joint spread into a small vertex cluster, swaying over the frames.
"""

import os
import sys
import argparse
import logging

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src import rng as rng_streams
from src.ingest import JointRegressor, write_obj
from src.skeleton_encoder import SkeletonGraph

# Configure logging
logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", level=logging.INFO
)
logger = logging.getLogger(__name__)


def toy_regressor(num_joints: int, per_joint: int, seed: int) -> JointRegressor:
    r = rng_streams.stream(seed, "regressor")
    matrix = np.zeros((num_joints, num_joints * per_joint))
    for j in range(num_joints):
        weights = r.dirichlet(np.ones(per_joint))
        matrix[j, j * per_joint:(j + 1) * per_joint] = weights
    return JointRegressor(matrix)


def toy_meshes(graph: SkeletonGraph, per_joint: int, frames: int, seed: int) -> list:
    r = rng_streams.stream(seed, "meshes")
    offsets = r.normal(0.0, 0.02, size=(graph.num_joints, per_joint, 3))
    meshes = []
    for t in range(frames):
        sway = np.array([0.05 * np.sin(0.5 * t), 0.0, 0.0])
        vertices = (graph.rest_pose[:, None, :] + offsets + sway).reshape(-1, 3)
        meshes.append(vertices)
    return meshes


def main():
    parser = argparse.ArgumentParser(description="Toy joint regressor and meshes")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--per-joint", type=int, default=4, help="Vertices per joint cluster")
    parser.add_argument("--frames", type=int, default=4, help="Meshes to write")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    graph = SkeletonGraph.human36m()
    os.makedirs(args.out, exist_ok=True)
    regressor = toy_regressor(graph.num_joints, args.per_joint, args.seed)
    regressor.save(os.path.join(args.out, "regressor.bin"))
    for t, vertices in enumerate(toy_meshes(graph, args.per_joint, args.frames, args.seed)):
        write_obj(os.path.join(args.out, f"mesh_{t:04d}.obj"), vertices)
    logger.info(f"Wrote a {regressor.shape[0]}×{regressor.shape[1]} regressor and {args.frames} meshes to {args.out}")


if __name__ == "__main__":
    main()
