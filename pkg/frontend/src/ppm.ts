/**
 * Decoder for binary portable pixmaps (P6) and graymaps (P5).
 *
 * Only 8-bit samples (maxval up to 255) are supported. Grayscale images are
 * replicated to three channels so every decoded image is RGB. Values are
 * scaled by the declared maxval into [0, 1].
 */

import { readFileSync } from 'node:fs'

import { DataError } from './errors'

export interface DecodedImage {
  width: number
  height: number
  /** height x width x 3 interleaved values in [0, 1]. */
  pixels: Float32Array
}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0d, 0x0b, 0x0c])

class HeaderScanner {
  offset = 0

  constructor(private readonly buf: Buffer) {}

  // Header tokens are separated by whitespace; a # starts a comment that
  // runs to the end of the line and counts as whitespace.
  private skipSeparators(): void {
    while (this.offset < this.buf.length) {
      const byte = this.buf[this.offset]
      if (WHITESPACE.has(byte)) {
        this.offset++
      } else if (byte === 0x23) {
        while (this.offset < this.buf.length && this.buf[this.offset] !== 0x0a) {
          this.offset++
        }
      } else {
        return
      }
    }
  }

  token(what: string): string {
    this.skipSeparators()
    const start = this.offset
    while (this.offset < this.buf.length && !WHITESPACE.has(this.buf[this.offset])) {
      if (this.buf[this.offset] === 0x23) break
      this.offset++
    }
    if (this.offset === start) {
      throw new DataError(`missing ${what} in image header`)
    }
    return this.buf.toString('latin1', start, this.offset)
  }

  integer(what: string): number {
    const text = this.token(what)
    if (!/^\d+$/.test(text)) {
      throw new DataError(`${what} must be a decimal integer, got ${JSON.stringify(text)}`)
    }
    return parseInt(text, 10)
  }

  // Exactly one whitespace byte separates the maxval from the sample bytes.
  payloadStart(): number {
    if (this.offset >= this.buf.length || !WHITESPACE.has(this.buf[this.offset])) {
      throw new DataError('missing whitespace before image samples')
    }
    return this.offset + 1
  }
}

export function decodeImage(data: Buffer): DecodedImage {
  const scanner = new HeaderScanner(data)
  const magic = scanner.token('format magic')
  if (magic !== 'P5' && magic !== 'P6') {
    throw new DataError(`unsupported image format ${JSON.stringify(magic)}, expected P5 or P6`)
  }
  const channels = magic === 'P6' ? 3 : 1
  const width = scanner.integer('width')
  const height = scanner.integer('height')
  const maxval = scanner.integer('maxval')
  if (width < 1 || height < 1) {
    throw new DataError(`image dimensions must be positive, got ${width} x ${height}`)
  }
  if (maxval < 1 || maxval > 255) {
    throw new DataError(`maxval ${maxval} out of supported range 1..255`)
  }
  const start = scanner.payloadStart()
  const expected = width * height * channels
  if (data.length - start < expected) {
    throw new DataError(
      `truncated image samples: expected ${expected} bytes, got ${data.length - start}`,
    )
  }
  const pixels = new Float32Array(width * height * 3)
  for (let i = 0; i < width * height; i++) {
    if (channels === 3) {
      pixels[3 * i] = data[start + 3 * i] / maxval
      pixels[3 * i + 1] = data[start + 3 * i + 1] / maxval
      pixels[3 * i + 2] = data[start + 3 * i + 2] / maxval
    } else {
      const value = data[start + i] / maxval
      pixels[3 * i] = value
      pixels[3 * i + 1] = value
      pixels[3 * i + 2] = value
    }
  }
  return { width, height, pixels }
}

export function readImageFile(path: string): DecodedImage {
  let data: Buffer
  try {
    data = readFileSync(path)
  } catch (err) {
    throw new DataError(`cannot read image ${path}: ${err}`)
  }
  try {
    return decodeImage(data)
  } catch (err) {
    if (err instanceof DataError) {
      throw new DataError(`${path}: ${err.message}`)
    }
    throw err
  }
}
