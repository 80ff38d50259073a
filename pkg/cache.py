import time
import hashlib
import logging
from typing import Any, Callable, Optional

from config import CACHE_MAX_SIZE

logger = logging.getLogger(__name__)


class ComputationCache:
    """
    Bounded in-memory cache for expensive deterministic computations
    (clutter normalization constants). Entries never expire; the oldest
    entries are evicted once max_size is reached.
    """
    def __init__(self, name: str, max_size: int = CACHE_MAX_SIZE):
        self.name = name
        self.cache = {}
        self.max_size = max_size
        self.hits = 0
        self.misses = 0
        logger.info(f"Initialized {name} cache with max_size={max_size}")

    def _get_key(self, key: str) -> str:
        """Generate a hash key for consistent storage"""
        return hashlib.md5(key.encode()).hexdigest()

    def _enforce_max_size(self):
        """Enforce maximum cache size by removing oldest entries"""
        if len(self.cache) >= self.max_size:
            sorted_items = sorted(self.cache.items(), key=lambda x: x[1]['timestamp'])
            to_remove = len(self.cache) - self.max_size + 1
            for key, _ in sorted_items[:to_remove]:
                del self.cache[key]
            logger.debug(f"Enforced max size of {self.name} cache, removed {to_remove} entries")

    def get(self, key: str) -> Optional[Any]:
        """Get value from cache"""
        cache_key = self._get_key(key)
        if cache_key in self.cache:
            self.hits += 1
            logger.debug(f"Cache hit for key: {key[:80]}")
            return self.cache[cache_key]['value']

        self.misses += 1
        logger.debug(f"Cache miss for key: {key[:80]}")
        return None

    def set(self, key: str, value: Any):
        """Set value in cache"""
        self._enforce_max_size()
        self.cache[self._get_key(key)] = {
            'value': value,
            'timestamp': time.monotonic()
        }

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        """Return the cached value for key, computing and storing it on a miss"""
        value = self.get(key)
        if value is None:
            value = compute()
            self.set(key, value)
        return value

    def clear(self):
        """Clear all cache entries"""
        self.cache.clear()
        self.hits = 0
        self.misses = 0
        logger.info(f"{self.name} cache cleared")

    def size(self) -> int:
        return len(self.cache)

    def stats(self) -> dict:
        """Get cache statistics"""
        return {
            'name': self.name,
            'size': len(self.cache),
            'max_size': self.max_size,
            'hits': self.hits,
            'misses': self.misses,
        }


# Global cache instances
clutter_cache = ComputationCache("clutter-normalization")


def get_clutter_cache() -> ComputationCache:
    """Get the clutter normalization cache"""
    return clutter_cache


def clear_all_caches():
    """Clear all caches"""
    clutter_cache.clear()
    logger.info("All caches cleared")
