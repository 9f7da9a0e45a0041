"""
state_cache.py – Eigenbasis cache for DotControl

Handles:
- Choosing a cache backend (null, filesystem or Redis) from BaseConfig
- Stable md5 keys over physical parameters, grid, solver options and field
- Solving through the cache so repeated detunings are never re-solved
- Parallel solves of several fields with a thread pool
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

from cachelib import FileSystemCache, NullCache, RedisCache

from config import BaseConfig
from services.hamiltonian import GridSpec, PhysicalParams, SolverOptions, solve_lowest

logger = logging.getLogger(__name__)

_cache = None


def make_cache(cache_type: str | None = None, cache_dir: str | None = None, redis_url: str | None = None):
    """Build the cachelib backend named by cache_type (defaults from BaseConfig)."""
    cache_type = (cache_type or BaseConfig.CACHE_TYPE).lower()
    timeout = BaseConfig.CACHE_DEFAULT_TIMEOUT
    if cache_type == "null":
        return NullCache()
    if cache_type == "filesystem":
        return FileSystemCache(cache_dir or BaseConfig.CACHE_DIR, threshold=0, default_timeout=timeout)
    if cache_type == "redis":
        import redis

        client = redis.from_url(redis_url or BaseConfig.CACHE_REDIS_URL)
        return RedisCache(host=client, key_prefix="dotcontrol:", default_timeout=timeout)
    raise ValueError(f"Unknown cache type: {cache_type}")


def get_cache():
    global _cache
    if _cache is None:
        _cache = make_cache()
        logger.info(f"State cache initialized with backend: {type(_cache).__name__}")
    return _cache


def set_cache(cache):
    global _cache
    _cache = cache


def state_key(params: PhysicalParams, grid: GridSpec, options: SolverOptions, F: float, n_states: int) -> str:
    input_str = json.dumps({
        "params": asdict(params),
        "grid": asdict(grid),
        "solver": asdict(options),
        "F": round(float(F), 9),
        "n_states": int(n_states),
    }, sort_keys=True)
    digest = hashlib.md5(input_str.encode("utf-8")).hexdigest()
    return f"eigenbasis:{digest}"


def cached_solve(params: PhysicalParams, F: float, n_states: int = 5, grid: GridSpec | None = None,
                 options: SolverOptions | None = None, cache=None):
    """solve_lowest through the state cache."""
    grid = grid or GridSpec()
    options = options or SolverOptions()
    cache = cache if cache is not None else get_cache()
    key = state_key(params, grid, options, F, n_states)

    try:
        cached = cache.get(key)
    except Exception as e:
        logger.warning(f"State cache lookup failed for F={F}: {e}")
        cached = None
    if cached is not None:
        logger.info(f"Eigenbasis cache hit: F={F:.3f} V/cm ({key})")
        return cached

    logger.debug(f"Eigenbasis cache miss: {key}")
    basis = solve_lowest(params, F, n_states=n_states, grid=grid, options=options)
    try:
        cache.set(key, basis)
    except Exception as e:
        logger.warning(f"Could not store eigenbasis for F={F} in cache: {e}")
    return basis


def solve_many(params: PhysicalParams, fields, n_states: int = 5, grid: GridSpec | None = None,
               options: SolverOptions | None = None, max_workers: int | None = None, cache=None) -> list:
    """Solve every field concurrently; results are in the order of fields."""
    fields = list(fields)
    workers = max(1, min(max_workers or BaseConfig.MAX_WORKERS, len(fields) or 1))

    def solve(F):
        return cached_solve(params, F, n_states=n_states, grid=grid, options=options, cache=cache)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(solve, fields))
