/**
 * Deterministic pseudo-random source for backbone weights.
 *
 * Uses mulberry32 over a 32-bit state. Only multiplies, shifts, and one
 * square root are involved anywhere downstream, so the generated weights
 * are bit-identical across runs and platforms for the same seed.
 */

/** 32-bit FNV-1a hash, used to turn weight role names into seeds. */
export function hashSeed(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193)
  }
  return h >>> 0
}

export class SeededRng {
  private state: number

  constructor(seed: number) {
    this.state = seed | 0
  }

  /** Uniform float in [0, 1). */
  next(): number {
    this.state = (this.state + 0x6d2b79f5) | 0
    let t = this.state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }

  /** Uniform float in [lo, hi). */
  uniform(lo: number, hi: number): number {
    return lo + (hi - lo) * this.next()
  }

  /** Float32Array of uniform values in [-limit, limit). */
  uniformArray(count: number, limit: number): Float32Array {
    const out = new Float32Array(count)
    for (let i = 0; i < count; i++) {
      out[i] = this.uniform(-limit, limit)
    }
    return out
  }
}
