/**
 * Little-endian binary containers shared with the scoring engine.
 *
 * Both formats follow the same frame: an 8-byte ASCII magic, a u32 format
 * version, format-specific header fields, a float32 payload, and a trailing
 * u32-length-prefixed UTF-8 metadata block holding a JSON object. Floats are
 * written with explicit little-endian views so the bytes do not depend on
 * platform endianness.
 */

import { readFileSync, writeFileSync } from 'node:fs'

import { FormatError } from './errors'

export const BANK_MAGIC = 'CAPBANK1'
export const BANK_VERSION = 1
export const DTYPE_FLOAT32 = 0

export const SMAP_MAGIC = 'CAPSMAP1'
export const SMAP_VERSION = 1

const MAGIC_LEN = 8

export interface BankFile {
  /** count x dim feature rows, row-major. */
  rows: Float32Array
  count: number
  dim: number
  ids: unknown[]
  metadata: Record<string, unknown>
}

export interface SpatialMapFile {
  /** One height x width x depth grid per sample, row-major. */
  grids: Float32Array[]
  height: number
  width: number
  depth: number
  ids: unknown[]
}

class Reader {
  private offset = 0

  constructor(private readonly buf: Buffer) {}

  private take(count: number, what: string): number {
    if (this.offset + count > this.buf.length) {
      const got = this.buf.length - this.offset
      throw new FormatError(`truncated ${what}: expected ${count} bytes, got ${got}`)
    }
    const start = this.offset
    this.offset += count
    return start
  }

  magic(expected: string): void {
    const start = this.take(MAGIC_LEN, 'magic')
    const found = this.buf.toString('latin1', start, start + MAGIC_LEN)
    if (found !== expected) {
      throw new FormatError(`bad magic: expected ${expected}, got ${JSON.stringify(found)}`)
    }
  }

  version(expected: number): void {
    const version = this.u32('format version')
    if (version !== expected) {
      throw new FormatError(`unsupported format version ${version}, expected ${expected}`)
    }
  }

  u8(what: string): number {
    return this.buf.readUInt8(this.take(1, what))
  }

  u32(what: string): number {
    return this.buf.readUInt32LE(this.take(4, what))
  }

  u64(what: string): number {
    const value = this.buf.readBigUInt64LE(this.take(8, what))
    if (value > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new FormatError(`${what} ${value} is too large`)
    }
    return Number(value)
  }

  f32Array(count: number, what: string): Float32Array {
    const start = this.take(4 * count, what)
    const view = new DataView(this.buf.buffer, this.buf.byteOffset + start, 4 * count)
    const out = new Float32Array(count)
    for (let i = 0; i < count; i++) {
      out[i] = view.getFloat32(4 * i, true)
    }
    return out
  }

  metadata(): Record<string, unknown> {
    const length = this.u32('metadata length')
    const start = this.take(length, 'metadata')
    let parsed: unknown
    try {
      parsed = JSON.parse(this.buf.toString('utf8', start, start + length))
    } catch (err) {
      throw new FormatError(`metadata is not valid UTF-8 JSON: ${err}`)
    }
    if (typeof parsed !== 'object' || parsed === null || Array.isArray(parsed)) {
      throw new FormatError('metadata must be a JSON object')
    }
    return parsed as Record<string, unknown>
  }

  eof(): void {
    if (this.offset !== this.buf.length) {
      throw new FormatError('trailing bytes after metadata block')
    }
  }
}

class Writer {
  private readonly parts: Buffer[] = []

  magic(value: string): void {
    this.parts.push(Buffer.from(value, 'latin1'))
  }

  u8(value: number): void {
    const buf = Buffer.alloc(1)
    buf.writeUInt8(value)
    this.parts.push(buf)
  }

  u32(value: number): void {
    const buf = Buffer.alloc(4)
    buf.writeUInt32LE(value)
    this.parts.push(buf)
  }

  u64(value: number): void {
    const buf = Buffer.alloc(8)
    buf.writeBigUInt64LE(BigInt(value))
    this.parts.push(buf)
  }

  f32Array(values: Float32Array): void {
    const buf = Buffer.alloc(4 * values.length)
    const view = new DataView(buf.buffer, buf.byteOffset, buf.length)
    for (let i = 0; i < values.length; i++) {
      view.setFloat32(4 * i, values[i], true)
    }
    this.parts.push(buf)
  }

  metadata(meta: Record<string, unknown>): void {
    // Keys are sorted so identical content always yields identical bytes.
    const sorted = Object.fromEntries(
      Object.entries(meta).sort((a, b) => (a[0] < b[0] ? -1 : a[0] > b[0] ? 1 : 0)),
    )
    const raw = Buffer.from(JSON.stringify(sorted), 'utf8')
    this.u32(raw.length)
    this.parts.push(raw)
  }

  finish(): Buffer {
    return Buffer.concat(this.parts)
  }
}

export function encodeBank(bank: BankFile): Buffer {
  if (bank.rows.length !== bank.count * bank.dim) {
    throw new FormatError(
      `payload has ${bank.rows.length} values for ${bank.count} x ${bank.dim} rows`,
    )
  }
  if (bank.ids.length !== bank.count) {
    throw new FormatError(`got ${bank.ids.length} ids for ${bank.count} rows`)
  }
  const writer = new Writer()
  writer.magic(BANK_MAGIC)
  writer.u32(BANK_VERSION)
  writer.u8(DTYPE_FLOAT32)
  writer.u64(bank.count)
  writer.u64(bank.dim)
  writer.f32Array(bank.rows)
  writer.metadata({ ...bank.metadata, ids: bank.ids })
  return writer.finish()
}

export function decodeBank(buf: Buffer): BankFile {
  const reader = new Reader(buf)
  reader.magic(BANK_MAGIC)
  reader.version(BANK_VERSION)
  const dtype = reader.u8('dtype flag')
  if (dtype !== DTYPE_FLOAT32) {
    throw new FormatError(`unknown dtype flag ${dtype}`)
  }
  const count = reader.u64('row count')
  const dim = reader.u64('feature dim')
  const rows = reader.f32Array(count * dim, 'feature payload')
  const metadata = reader.metadata()
  reader.eof()
  const ids = metadata['ids']
  delete metadata['ids']
  if (!Array.isArray(ids) || ids.length !== count) {
    throw new FormatError(`metadata must carry one id per row, got ${JSON.stringify(ids)}`)
  }
  return { rows, count, dim, ids, metadata }
}

export function encodeSpatialMaps(maps: SpatialMapFile): Buffer {
  const { grids, height, width, depth, ids } = maps
  if (grids.length === 0) {
    throw new FormatError('need at least one spatial map')
  }
  if (ids.length !== grids.length) {
    throw new FormatError(`got ${ids.length} ids for ${grids.length} maps`)
  }
  const cell = height * width * depth
  for (let i = 0; i < grids.length; i++) {
    if (grids[i].length !== cell) {
      throw new FormatError(`map ${i} has ${grids[i].length} values, expected ${cell}`)
    }
  }
  const writer = new Writer()
  writer.magic(SMAP_MAGIC)
  writer.u32(SMAP_VERSION)
  writer.u64(grids.length)
  writer.u64(height)
  writer.u64(width)
  writer.u64(depth)
  for (const grid of grids) {
    writer.f32Array(grid)
  }
  writer.metadata({ ids })
  return writer.finish()
}

export function decodeSpatialMaps(buf: Buffer): SpatialMapFile {
  const reader = new Reader(buf)
  reader.magic(SMAP_MAGIC)
  reader.version(SMAP_VERSION)
  const count = reader.u64('map count')
  const height = reader.u64('map height')
  const width = reader.u64('map width')
  const depth = reader.u64('map depth')
  const grids: Float32Array[] = []
  for (let i = 0; i < count; i++) {
    grids.push(reader.f32Array(height * width * depth, `map ${i} payload`))
  }
  const metadata = reader.metadata()
  reader.eof()
  const ids = metadata['ids']
  if (!Array.isArray(ids) || ids.length !== count) {
    throw new FormatError(`metadata has ${Array.isArray(ids) ? ids.length : 0} ids for ${count} maps`)
  }
  return { grids, height, width, depth, ids }
}

export function writeBankFile(path: string, bank: BankFile): void {
  writeFileSync(path, encodeBank(bank))
}

export function readBankFile(path: string): BankFile {
  return decodeBank(readFileSync(path))
}

export function writeSpatialMapsFile(path: string, maps: SpatialMapFile): void {
  writeFileSync(path, encodeSpatialMaps(maps))
}

export function readSpatialMapsFile(path: string): SpatialMapFile {
  return decodeSpatialMaps(readFileSync(path))
}
