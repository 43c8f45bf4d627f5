#!/usr/bin/env node
/**
 * Command line entry point.
 *
 * Exit codes follow the scoring engine's convention: 0 success, 1 usage
 * error, 2 data error. Errors go to stderr as "cap-extract: <category>:
 * <message>".
 */

import { parseArgs } from 'node:util'

import { BACKBONES } from './backbone'
import { DataError } from './errors'
import { extractDirectory } from './extract'

const USAGE = 'usage: cap-extract --images DIR --backbone NAME --bank OUT [--maps OUT]'

function fail(category: 'usage' | 'data', message: string): number {
  process.stderr.write(`cap-extract: ${category}: ${message}\n`)
  if (category === 'usage') {
    process.stderr.write(USAGE + '\n')
    return 1
  }
  return 2
}

export async function main(argv: string[]): Promise<number> {
  let parsed: { values: Record<string, unknown> }
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        images: { type: 'string' },
        backbone: { type: 'string' },
        bank: { type: 'string' },
        maps: { type: 'string' },
        help: { type: 'boolean' },
      },
      strict: true,
      allowPositionals: false,
    })
  } catch (err) {
    return fail('usage', err instanceof Error ? err.message : String(err))
  }
  const values = parsed.values as {
    images?: string
    backbone?: string
    bank?: string
    maps?: string
    help?: boolean
  }
  if (values.help) {
    process.stdout.write(USAGE + '\n')
    process.stdout.write(`backbones: ${Object.keys(BACKBONES).sort().join(', ')}\n`)
    return 0
  }
  for (const required of ['images', 'backbone', 'bank'] as const) {
    if (!values[required]) {
      return fail('usage', `missing required option --${required}`)
    }
  }
  try {
    const summary = await extractDirectory({
      imagesDir: values.images!,
      backbone: values.backbone!,
      bankPath: values.bank!,
      mapsPath: values.maps,
    })
    process.stdout.write(`wrote ${summary.count} x ${summary.dim} bank to ${values.bank}\n`)
    if (values.maps) {
      process.stdout.write(`wrote ${summary.count} spatial maps to ${values.maps}\n`)
    }
    return 0
  } catch (err) {
    if (err instanceof DataError) {
      return fail('data', err.message)
    }
    throw err
  }
}

if (require.main === module) {
  main(process.argv.slice(2)).then(
    (code) => {
      process.exitCode = code
    },
    (err) => {
      console.error(err)
      process.exitCode = 2
    },
  )
}
