/** Error categories mirrored from the scoring engine's CLI conventions. */

/** Malformed or truncated container bytes. */
export class FormatError extends Error {
  constructor(message: string) {
    super(message)
    this.name = 'FormatError'
  }
}

/** Invalid input data, such as an unreadable image or an empty directory. */
export class DataError extends Error {
  constructor(message: string) {
    super(message)
    this.name = 'DataError'
  }
}
